"""Evaluation quantities: compression rates, sparsity sweeps, LLD gaps, model comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import compression as cmp
from .hmm import HmmModel
from .model_io import dense_file_size, quantized_file_size
from .training import Corpus, EmRunRecord, heldout_score

FP32_BITS = 32


@dataclass(frozen=True)
class MatrixCompression:
    name: str
    rows: int
    cols: int
    nonzero: float  # may be fractional when derived from a sparsity fraction
    bits: int

    @property
    def total(self) -> int:
        return self.rows * self.cols


@dataclass
class CompressionReport:
    matrices: list[MatrixCompression]
    paper_style_rate: float
    storage_style_rate: Optional[float] = None

    CSV_HEADER = ("matrix", "rows", "cols", "total", "nonzero", "bits",
                  "paper_style_rate", "storage_style_rate")

    def rows(self):
        storage = "" if self.storage_style_rate is None else self.storage_style_rate
        for m in self.matrices:
            yield (m.name, m.rows, m.cols, m.total, m.nonzero, m.bits, self.paper_style_rate, storage)


def _paper_rate(matrices: Sequence[MatrixCompression]) -> float:
    value_bits = sum(m.nonzero * m.bits for m in matrices)
    dense_bits = sum(m.total * FP32_BITS for m in matrices)
    return 1.0 - value_bits / dense_bits


def compression_rate(sparsities: Mapping[str, float], shapes: Mapping[str, tuple[int, int]],
                     bits: int) -> CompressionReport:
    """Rate from value bits only: ``1 - sum(nonzero * b) / sum(total * 32)``, entry-count weighted."""
    mats = []
    for name, s in sparsities.items():
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"sparsity of {name} outside [0, 1]: {s}")
        r, c = shapes[name]
        mats.append(MatrixCompression(name, r, c, (1.0 - s) * r * c, bits))
    return CompressionReport(mats, _paper_rate(mats))


def storage_rate(file_bytes: int, total_entries: int) -> float:
    return 1.0 - 8.0 * file_bytes / (total_entries * FP32_BITS)


def quantized_compression(qmodel: cmp.QuantizedModel) -> CompressionReport:
    """Both rates for an in-memory quantized model; the storage rate uses the analytic file size."""
    mats = [MatrixCompression(name, q.rows, q.cols, q.nnz, q.bits) for name, q in qmodel.matrices().items()]
    total = sum(m.total for m in mats)
    return CompressionReport(mats, _paper_rate(mats), storage_rate(quantized_file_size(qmodel), total))


def dense_compression(model: HmmModel) -> CompressionReport:
    """A dense float model counted at full width; only exact zeros (e.g. after pruning) save value bits."""
    mats = [MatrixCompression(name, *m.shape, int(np.count_nonzero(m)), FP32_BITS) for name, m in model.matrices().items()]
    total = sum(m.total for m in mats)
    return CompressionReport(mats, _paper_rate(mats), storage_rate(dense_file_size(model), total))


# ---------------------------------------------------------------------------
# Sparsity sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    bits: int
    matrix: str
    total: int
    zeros: int

    @property
    def sparsity(self) -> float:
        return self.zeros / self.total


SWEEP_CSV_HEADER = ("bits", "matrix", "total", "zeros", "sparsity")


def sparsity_sweep(model: HmmModel, bit_widths: Sequence[int]) -> list[SweepRow]:
    """Auto-pruning sparsity of fixed-point linear quantization, widest bit width first."""
    rows = []
    for b in sorted(set(bit_widths), reverse=True):
        for name, mat in model.matrices().items():
            rep = cmp.sparsity(cmp.quantize_linear_fixed(mat, b), name)
            rows.append(SweepRow(b, name, rep.total, rep.zeros))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> tuple[list[int], dict[str, list[float]]]:
    """Pivot into matrix -> sparsity per bit width (bit widths descending)."""
    bits = sorted({r.bits for r in rows}, reverse=True)
    table: dict[str, list[float]] = {}
    for r in rows:
        table.setdefault(r.matrix, [np.nan] * len(bits))[bits.index(r.bits)] = r.sparsity
    return bits, table


# ---------------------------------------------------------------------------
# LLD gap
# ---------------------------------------------------------------------------


class InsufficientEventsError(ValueError):
    pass


@dataclass(frozen=True)
class LldGapReport:
    upper: float
    lower: float
    n_cycles: int

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def _nan_or(x: float, fallback: float) -> float:
    return fallback if np.isnan(x) else x


def lld_gap(record: EmRunRecord) -> LldGapReport:
    """Bounds of the oscillating training curve.

    A cycle runs from one quantization event to the next.  Its upper value is
    the largest LLD reached inside it, including the LLD just before the
    closing quantization; its lower value is the LLD right after that
    quantization.  Bounds are the means over cycles.
    """
    entries = record.entries
    events = [i for i, e in enumerate(entries) if e.quantized]
    if len(events) < 2:
        raise InsufficientEventsError("insufficient events: need at least 2 quantization events")
    uppers, lowers = [], []
    for a, b in zip(events[:-1], events[1:]):
        closing = entries[b]
        inside = [e.train_lld for e in entries[a + 1 : b + 1]]
        inside.append(_nan_or(closing.pre_quant_lld, closing.train_lld))
        uppers.append(max(inside))
        lowers.append(_nan_or(closing.post_quant_lld, closing.train_lld))
    return LldGapReport(float(np.mean(uppers)), float(np.mean(lowers)), len(uppers))


def oscillation_events(record: EmRunRecord) -> list[tuple[int, bool, bool]]:
    """Per quantization event with a following interval: (step, dipped, recovered).

    ``dipped``: the quantized weights score strictly lower than the M-step
    output they came from.  ``recovered``: some later step before the next
    event scores strictly higher than the quantized weights did.
    """
    entries = record.entries
    events = [i for i, e in enumerate(entries) if e.quantized]
    out = []
    for k, i in enumerate(events):
        nxt = events[k + 1] if k + 1 < len(events) else len(entries)
        following = entries[i + 1 : nxt]
        if not following:
            continue
        e = entries[i]
        dipped = e.post_quant_lld < e.pre_quant_lld
        later = [f.train_lld for f in following]
        if nxt < len(entries):
            later += [entries[nxt].train_lld, entries[nxt].pre_quant_lld]
        recovered = max(later) > e.post_quant_lld
        out.append((e.step, bool(dipped), bool(recovered)))
    return out


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------


@dataclass
class Comparison:
    reference_lld: float
    candidate_lld: float
    n_impossible: int
    n_sequences: int
    kl: dict[str, float]
    sparsity: dict[str, float]
    paper_style_rate: float
    storage_style_rate: Optional[float]
    label: str = ""

    @property
    def delta_lld(self) -> float:
        return self.candidate_lld - self.reference_lld

    CSV_HEADER = (
        "label", "reference_lld", "candidate_lld", "delta_lld", "n_impossible", "n_sequences",
        "kl_initial", "kl_transition", "kl_emission",
        "sparsity_initial", "sparsity_transition", "sparsity_emission",
        "paper_style_rate", "storage_style_rate",
    )

    def row(self):
        return (
            self.label, self.reference_lld, self.candidate_lld, self.delta_lld, self.n_impossible,
            self.n_sequences, *(self.kl[n] for n in cmp.MATRIX_NAMES),
            *(self.sparsity[n] for n in cmp.MATRIX_NAMES), self.paper_style_rate,
            "" if self.storage_style_rate is None else self.storage_style_rate,
        )


def compare_models(reference: HmmModel, candidate: Union[HmmModel, cmp.QuantizedModel],
                   heldout: Corpus, label: str = "") -> Comparison:
    if isinstance(candidate, cmp.QuantizedModel):
        cand_model = candidate.to_model()
        report = quantized_compression(candidate)
        spars = {n: cmp.sparsity(q).fraction for n, q in candidate.matrices().items()}
    else:
        cand_model = candidate
        report = dense_compression(candidate)
        spars = {n: cmp.sparsity(m).fraction for n, m in candidate.matrices().items()}
    if (cand_model.hidden_size, cand_model.vocab_size) != (reference.hidden_size, reference.vocab_size):
        raise ValueError("reference and candidate dimensions differ")

    ref_score = heldout_score(reference, heldout)
    cand_score = heldout_score(cand_model, heldout)
    ref_mats, cand_mats = reference.matrices(), cand_model.matrices()
    kl = {n: cmp.kl_divergence_rows(ref_mats[n], cand_mats[n])[1] for n in cmp.MATRIX_NAMES}
    return Comparison(
        ref_score.mean_loglik, cand_score.mean_loglik, cand_score.n_impossible, cand_score.n_sequences,
        kl, spars, report.paper_style_rate, report.storage_style_rate, label,
    )

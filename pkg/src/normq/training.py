"""Baum-Welch EM over chunked corpora, with optional quantization-aware steps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import compression as cmp
from .hmm import HmmModel, batch_loglik, expected_counts

log = logging.getLogger(__name__)

QUANTIZERS = ("none", "norm-q", "kmeans")

# Per-purpose stream ids for derive_rng.
_PURPOSES = {"init": 0, "sample": 1, "kmeans": 2, "decode": 3, "split": 4, "truth": 5}


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run's single seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _PURPOSES[purpose]]))


class ModelDataError(ValueError):
    """Every sequence in a chunk has probability zero under the model."""


@dataclass
class Corpus:
    sequences: list[np.ndarray]
    vocab_size: int
    n_chunks: int = 1

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if not self.sequences:
            raise ValueError("empty corpus")
        if self.n_chunks < 1 or self.n_chunks > len(self.sequences):
            raise ValueError(f"cannot split {len(self.sequences)} sequences into {self.n_chunks} chunks")
        for i, s in enumerate(self.sequences):
            if s.ndim != 1 or s.size == 0:
                raise ValueError(f"sequence {i} is empty")
            if s.min() < 0 or s.max() >= self.vocab_size:
                raise ValueError(f"sequence {i} has token IDs outside [0, {self.vocab_size})")

    def __len__(self):
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return int(sum(s.size for s in self.sequences))

    def chunks(self) -> list[list[np.ndarray]]:
        """Contiguous, fixed-order chunks (sizes differ by at most one)."""
        bounds = np.linspace(0, len(self.sequences), self.n_chunks + 1).round().astype(int)
        return [self.sequences[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def rechunk(self, n_chunks: int) -> "Corpus":
        return Corpus(self.sequences, self.vocab_size, n_chunks)

    def split(self, heldout_fraction: float) -> tuple["Corpus", "Corpus"]:
        """Last ``heldout_fraction`` of sequences held out; chunking kept on the training part."""
        n_test = max(1, int(round(len(self) * heldout_fraction)))
        if n_test >= len(self):
            raise ValueError("held-out split leaves no training data")
        train = self.sequences[:-n_test]
        return (
            Corpus(train, self.vocab_size, min(self.n_chunks, len(train))),
            Corpus(self.sequences[-n_test:], self.vocab_size),
        )

    @classmethod
    def from_array(cls, arr, vocab_size: int, n_chunks: int = 1) -> "Corpus":
        return cls(list(np.asarray(arr)), vocab_size, n_chunks)


@dataclass
class EmConfig:
    epochs: int = 1
    quantizer: str = "none"
    bits: int = 8
    interval: int = 20
    epsilon: float = cmp.DEFAULT_EPSILON
    seed: int = 0
    smoothing: float = 1e-9
    kmeans_iters: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.interval < 1:
            raise ValueError("interval must be at least 1")
        if self.quantizer not in QUANTIZERS:
            raise ValueError(f"quantizer must be one of {QUANTIZERS}")
        if self.quantizer != "none":
            cmp._check_bits(self.bits)
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")


@dataclass
class StepEntry:
    step: int
    epoch: int
    chunk: int
    train_lld: float  # mean per-sequence log-likelihood of the chunk, pre-update model
    train_lld_per_token: float
    test_lld: float = float("nan")  # held-out mean log-likelihood after the step
    quantized: bool = False
    pre_quant_lld: float = float("nan")  # chunk LLD of the M-step output, before quantizing
    post_quant_lld: float = float("nan")  # chunk LLD after quantize/dequantize
    n_impossible: int = 0


@dataclass
class EmRunRecord:
    entries: list[StepEntry] = field(default_factory=list)
    model: Optional[HmmModel] = None
    quantized_model: Optional[cmp.QuantizedModel] = None
    config: Optional[EmConfig] = None

    def __len__(self):
        return len(self.entries)

    @property
    def event_steps(self) -> list[int]:
        return [e.step for e in self.entries if e.quantized]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries], dtype=float)

    CSV_HEADER = (
        "step", "epoch", "chunk", "train_lld", "train_lld_per_token", "test_lld",
        "quantized", "pre_quant_lld", "post_quant_lld", "n_impossible",
    )

    def rows(self):
        for e in self.entries:
            yield (e.step, e.epoch, e.chunk, e.train_lld, e.train_lld_per_token, e.test_lld,
                   int(e.quantized), e.pre_quant_lld, e.post_quant_lld, e.n_impossible)


def _normalize_counts(counts: np.ndarray, smoothing: float) -> np.ndarray:
    c = counts + smoothing
    tot = c.sum(axis=-1, keepdims=True)
    return np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)


def _m_step(counts, smoothing: float) -> HmmModel:
    return HmmModel(
        _normalize_counts(counts.initial, smoothing),
        _normalize_counts(counts.transition, smoothing),
        _normalize_counts(counts.emission, smoothing),
    )


def _chunk_lld(model: HmmModel, chunk: Sequence) -> float:
    ll = batch_loglik(model, chunk)
    ok = np.isfinite(ll)
    return float(ll[ok].mean()) if ok.any() else float("-inf")


def em_step(model: HmmModel, chunk: Sequence, smoothing: float = 1e-9):
    """One Baum-Welch step.

    Returns the updated model and the mean per-sequence log-likelihood of
    ``chunk`` under the *input* model.  Impossible sequences are left out of
    both the counts and the mean.
    """
    new, lld, _ = _em_step_detail(model, chunk, smoothing)
    return new, lld


def _em_step_detail(model, chunk, smoothing):
    if len(chunk) == 0:
        raise ValueError("empty chunk")
    counts = expected_counts(model, chunk)
    ok = np.isfinite(counts.logliks)
    if not ok.any():
        raise ModelDataError("model inconsistent with data: every sequence in the chunk is impossible")
    return _m_step(counts, smoothing), float(counts.logliks[ok].mean()), counts.n_impossible


def random_init(hidden_size: int, vocab_size: int, seed: int) -> HmmModel:
    return HmmModel.random(hidden_size, vocab_size, derive_rng(seed, "init"))


def _quantize(model: HmmModel, config: EmConfig) -> tuple[HmmModel, cmp.QuantizedModel]:
    q = cmp.quantize_model(model, config.quantizer, config.bits, config.epsilon,
                           max_iters=config.kmeans_iters, seed=config.seed)
    # norm-q reconstructs normalized rows itself; kmeans centroids need the same rescue
    return q.to_model(renormalize=True), q


def _run(model, corpus, config, heldout, quantize: bool) -> EmRunRecord:
    record = EmRunRecord(config=config)
    chunks = corpus.chunks()
    total = config.epochs * len(chunks)
    step = 0
    qmodel = None
    for epoch in range(config.epochs):
        for ci, chunk in enumerate(chunks):
            step += 1
            model, lld, n_bad = _em_step_detail(model, chunk, config.smoothing)
            n_tok = sum(len(s) for s in chunk)
            entry = StepEntry(step, epoch, ci, lld, lld * len(chunk) / n_tok, n_impossible=n_bad)
            if quantize and (step % config.interval == 0 or step == total):
                entry.quantized = True
                entry.pre_quant_lld = _chunk_lld(model, chunk)
                model, qmodel = _quantize(model, config)
                entry.post_quant_lld = _chunk_lld(model, chunk)
            if heldout is not None:
                entry.test_lld = test_loglik(model, heldout)
            record.entries.append(entry)
            log.debug("step %d chunk %d lld %.6f%s", step, ci, lld, " [q]" if entry.quantized else "")
    record.model = model
    record.quantized_model = qmodel
    return record


def train(model: HmmModel, corpus: Corpus, config: EmConfig,
          heldout: Optional[Corpus] = None) -> EmRunRecord:
    """Plain EM: ``epochs * n_chunks`` steps, one chunk per step."""
    if config.quantizer != "none":
        raise ValueError("train() runs unquantized EM; use quantization_aware_train()")
    return _run(model, corpus, config, heldout, quantize=False)


def quantization_aware_train(model: HmmModel, corpus: Corpus, config: EmConfig,
                             heldout: Optional[Corpus] = None) -> EmRunRecord:
    """EM with quantize/dequantize after every ``interval``-th M step and after the last one.

    Training continues from the reconstructed weights.  The record's
    ``quantized_model`` holds the stored form of the final weights and
    ``model`` is exactly its reconstruction.
    """
    if config.quantizer == "none":
        raise ValueError("quantization_aware_train() needs quantizer 'norm-q' or 'kmeans'")
    return _run(model, corpus, config, heldout, quantize=True)


@dataclass
class HeldoutScore:
    mean_loglik: float  # over possible sequences
    n_impossible: int
    n_sequences: int
    n_tokens: int

    @property
    def per_token(self) -> float:
        return self.mean_loglik * (self.n_sequences - self.n_impossible) / max(self.n_tokens, 1)


def heldout_score(model: HmmModel, heldout: Corpus) -> HeldoutScore:
    ll = batch_loglik(model, heldout.sequences)
    ok = np.isfinite(ll)
    n_tok = int(sum(s.size for s, good in zip(heldout.sequences, ok) if good))
    mean = float(ll[ok].mean()) if ok.any() else float("-inf")
    return HeldoutScore(mean, int((~ok).sum()), len(ll), n_tok)


def test_loglik(model: HmmModel, heldout: Corpus) -> float:
    """Mean per-sequence held-out log-likelihood; impossible sequences are excluded
    (see :func:`heldout_score` for their count)."""
    return heldout_score(model, heldout).mean_loglik


test_loglik.__test__ = False  # keep pytest from collecting it when imported into tests


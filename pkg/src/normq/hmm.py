"""Discrete-observation hidden Markov models.

A model is the triple (initial, transition, emission) of row-stochastic
matrices, stored row-major with rows indexed by the source hidden state.
Inference uses the scaled forward/backward recursions: each message vector
is normalized at every step and the log of the normalizers is accumulated,
so the inner loops stay plain multiply-adds.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

#: Returned by :func:`forward_loglik` for sequences of probability zero.
IMPOSSIBLE = float("-inf")

#: Sequences per batch in the vectorized E-step.
BATCH_SIZE = 256


class ImpossibleSequenceError(ValueError):
    """Raised when a sequence has probability zero under the model."""


def is_impossible(loglik: float) -> bool:
    return loglik == IMPOSSIBLE


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HmmModel:
    """Immutable HMM parameters.

    Construction only checks that shapes agree.  Stochasticity is checked by
    :func:`validate_model`, because pruned or quantized models that break it
    still need to be represented and scored.
    """

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "initial", _frozen(self.initial, 1, "initial"))
        object.__setattr__(self, "transition", _frozen(self.transition, 2, "transition"))
        object.__setattr__(self, "emission", _frozen(self.emission, 2, "emission"))
        n = self.initial.shape[0]
        if n == 0:
            raise ValueError("hidden_size must be positive")
        if self.transition.shape != (n, n):
            raise ValueError(f"transition shape {self.transition.shape} does not match hidden_size {n}")
        if self.emission.shape[0] != n or self.emission.shape[1] == 0:
            raise ValueError(f"emission shape {self.emission.shape} does not match hidden_size {n}")

    @property
    def hidden_size(self) -> int:
        return self.initial.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.emission.shape[1]

    def matrices(self) -> dict[str, np.ndarray]:
        """Matrices keyed by name, with the initial vector as a 1-row matrix."""
        return {
            "initial": self.initial[None, :],
            "transition": self.transition,
            "emission": self.emission,
        }

    def permuted(self, perm: Sequence[int]) -> "HmmModel":
        """Relabel hidden states so that new state ``i`` is old state ``perm[i]``."""
        p = np.asarray(perm)
        return HmmModel(self.initial[p], self.transition[np.ix_(p, p)], self.emission[p])

    @classmethod
    def random(cls, hidden_size: int, vocab_size: int, seed, concentration: float = 1.0) -> "HmmModel":
        """Rows drawn from a symmetric Dirichlet.  ``seed`` may be an int or a Generator."""
        rng = np.random.default_rng(seed)
        alpha_n = np.full(hidden_size, concentration)
        alpha_v = np.full(vocab_size, concentration)
        return cls(
            rng.dirichlet(alpha_n),
            rng.dirichlet(alpha_n, size=hidden_size),
            rng.dirichlet(alpha_v, size=hidden_size),
        )

    @classmethod
    def sparse_random(cls, hidden_size: int, vocab_size: int, seed,
                      transition_support: int = 4, emission_support: int = 6) -> "HmmModel":
        """Rows with a random support of fixed size and Dirichlet(1) weights on it.

        Most entries are exactly zero, as in trained HMMs whose weights are
        dominated by near-zero values.  Used as ground truth for synthetic corpora.
        """
        rng = np.random.default_rng(seed)

        def rows(n, m, k):
            k = min(k, m)
            out = np.zeros((n, m))
            for i in range(n):
                out[i, rng.choice(m, k, replace=False)] = rng.dirichlet(np.ones(k))
            return out

        return cls(
            rng.dirichlet(np.ones(hidden_size)),
            rows(hidden_size, hidden_size, transition_support),
            rows(hidden_size, vocab_size, emission_support),
        )

    @classmethod
    def uniform(cls, hidden_size: int, vocab_size: int) -> "HmmModel":
        return cls(
            np.full(hidden_size, 1.0 / hidden_size),
            np.full((hidden_size, hidden_size), 1.0 / hidden_size),
            np.full((hidden_size, vocab_size), 1.0 / vocab_size),
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    matrix: str
    row: int
    kind: str  # "all-zero", "row-sum", "range", "non-finite"
    deviation: float

    def __str__(self):
        if self.kind == "all-zero":
            return f"all-zero row, {self.matrix} row {self.row}"
        if self.kind == "row-sum":
            side = "exceeds tolerance" if self.deviation > 0 else "falls short of 1 beyond tolerance"
            return f"row sum {1.0 + self.deviation:.12g} {side} ({self.matrix} row {self.row})"
        if self.kind == "range":
            return f"entry outside [0, 1] by {self.deviation:.3g} ({self.matrix} row {self.row})"
        return f"non-finite entry ({self.matrix} row {self.row})"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]


def validate_model(model: HmmModel, tolerance: float = 1e-9) -> ValidationReport:
    """Report every stochasticity violation; never raises."""
    report = ValidationReport()
    for name, mat in model.matrices().items():
        for i, row in enumerate(mat):
            if not np.all(np.isfinite(row)):
                report.violations.append(Violation(name, i, "non-finite", float("nan")))
                continue
            lo, hi = float(row.min()), float(row.max())
            if lo < 0.0 or hi > 1.0:
                report.violations.append(Violation(name, i, "range", max(-lo, hi - 1.0)))
            if not np.any(row != 0.0):
                report.violations.append(Violation(name, i, "all-zero", -1.0))
                continue
            dev = float(row.sum()) - 1.0
            if abs(dev) > tolerance:
                report.violations.append(Violation(name, i, "row-sum", dev))
    return report


# ---------------------------------------------------------------------------
# Scaled forward / backward
# ---------------------------------------------------------------------------


def _as_tokens(seq, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(seq, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("sequence must be a nonempty 1-D list of token IDs")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError(f"token IDs must lie in [0, {vocab_size})")
    return tokens


def _forward(model: HmmModel, tokens: np.ndarray):
    """Scaled forward pass over a batch of equal-length sequences.

    ``tokens`` has shape [B, T].  Returns the normalized messages [B, T, N],
    the per-step normalizers [B, T] (zero where the prefix became
    impossible) and the emission likelihoods [B, T, N].
    """
    B, T = tokens.shape
    N = model.hidden_size
    obs = model.emission.T[tokens]  # [B, T, N]
    alpha = np.empty((B, T, N))
    scale = np.empty((B, T))

    a = model.initial[None, :] * obs[:, 0]
    for t in range(T):
        if t:
            a = (alpha[:, t - 1] @ model.transition) * obs[:, t]
        c = a.sum(axis=1)
        scale[:, t] = c
        alpha[:, t] = a / np.where(c > 0.0, c, 1.0)[:, None]
    return alpha, scale, obs


def _loglik_from_scale(scale: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(scale).sum(axis=1)


def _backward(model: HmmModel, scale: np.ndarray, obs: np.ndarray) -> np.ndarray:
    B, T, N = obs.shape
    beta = np.empty((B, T, N))
    beta[:, T - 1] = 1.0
    safe = np.where(scale > 0.0, scale, 1.0)
    for t in range(T - 2, -1, -1):
        beta[:, t] = ((obs[:, t + 1] * beta[:, t + 1]) @ model.transition.T) / safe[:, t + 1, None]
    return beta


def forward_loglik(model: HmmModel, seq) -> float:
    """Natural-log probability of ``seq``, or :data:`IMPOSSIBLE` if it is zero."""
    tokens = _as_tokens(seq, model.vocab_size)
    _, scale, _ = _forward(model, tokens[None, :])
    return float(_loglik_from_scale(scale)[0])


def batch_loglik(model: HmmModel, sequences: Iterable) -> np.ndarray:
    """Log-likelihood of every sequence, batched by length; order preserved."""
    seqs = [_as_tokens(s, model.vocab_size) for s in sequences]
    out = np.empty(len(seqs))
    for idx, tokens in _length_batches(seqs):
        _, scale, _ = _forward(model, tokens)
        out[idx] = _loglik_from_scale(scale)
    return out


@dataclass
class ForwardBackwardStats:
    log_likelihood: float
    state_posteriors: np.ndarray  # [T, N]
    pair_posteriors: np.ndarray  # [N, N], summed over t
    emission_counts: np.ndarray  # [N, V]


def forward_backward(model: HmmModel, seq) -> ForwardBackwardStats:
    tokens = _as_tokens(seq, model.vocab_size)
    batch = tokens[None, :]
    alpha, scale, obs = _forward(model, batch)
    loglik = float(_loglik_from_scale(scale)[0])
    if is_impossible(loglik):
        raise ImpossibleSequenceError("sequence impossible under model")
    beta = _backward(model, scale, obs)
    post = alpha[0] * beta[0]
    pairs = _pair_counts(model, alpha, beta, scale, obs)
    emit = np.zeros((model.hidden_size, model.vocab_size))
    np.add.at(emit.T, tokens, post)
    return ForwardBackwardStats(loglik, post, pairs, emit)


def _pair_counts(model, alpha, beta, scale, obs) -> np.ndarray:
    if alpha.shape[1] < 2:
        return np.zeros((model.hidden_size, model.hidden_size))
    N = model.hidden_size
    nxt = obs[:, 1:] * beta[:, 1:] / scale[:, 1:, None]
    return (alpha[:, :-1].reshape(-1, N).T @ nxt.reshape(-1, N)) * model.transition


# ---------------------------------------------------------------------------
# Batched expected counts (E-step)
# ---------------------------------------------------------------------------


@dataclass
class ExpectedCounts:
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    logliks: np.ndarray  # per sequence, IMPOSSIBLE where excluded

    @property
    def n_impossible(self) -> int:
        return int(np.sum(self.logliks == IMPOSSIBLE))


def _length_batches(seqs: list[np.ndarray], batch_size: int = BATCH_SIZE):
    """Yield (indices, [B, T] token array) groups of equal length, in a fixed order."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        for start in range(0, len(idx), batch_size):
            chunk = np.array(idx[start : start + batch_size])
            yield chunk, np.stack([seqs[i] for i in chunk])


def _batch_counts(model: HmmModel, tokens: np.ndarray):
    alpha, scale, obs = _forward(model, tokens)
    ll = _loglik_from_scale(scale)
    ok = np.isfinite(ll)
    N, V = model.hidden_size, model.vocab_size
    init = np.zeros(N)
    trans = np.zeros((N, N))
    emit = np.zeros((N, V))
    if ok.any():
        alpha, scale, obs, tokens = alpha[ok], scale[ok], obs[ok], tokens[ok]
        beta = _backward(model, scale, obs)
        post = alpha * beta
        init = post[:, 0].sum(axis=0)
        trans = _pair_counts(model, alpha, beta, scale, obs)
        np.add.at(emit.T, tokens.ravel(), post.reshape(-1, N))
    return init, trans, emit, ll


def worker_count() -> int:
    """Thread cap from ``NORMQ_THREADS`` (default: 1)."""
    try:
        return max(1, int(os.environ.get("NORMQ_THREADS", "1")))
    except ValueError:
        return 1


def expected_counts(model: HmmModel, sequences: Sequence) -> ExpectedCounts:
    """Accumulate posterior counts over ``sequences``.

    Batches are fixed before any work is scheduled and summed in batch order,
    so the result does not depend on the number of worker threads.
    """
    seqs = [_as_tokens(s, model.vocab_size) for s in sequences]
    batches = list(_length_batches(seqs))
    workers = min(worker_count(), len(batches))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda b: _batch_counts(model, b[1]), batches))
    else:
        results = [_batch_counts(model, tokens) for _, tokens in batches]

    N, V = model.hidden_size, model.vocab_size
    init, trans, emit = np.zeros(N), np.zeros((N, N)), np.zeros((N, V))
    logliks = np.empty(len(seqs))
    for (idx, _), (bi, bt, be, ll) in zip(batches, results):
        init += bi
        trans += bt
        emit += be
        logliks[idx] = ll
    return ExpectedCounts(init, trans, emit, logliks)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _draw(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum_rows[i] is the CDF row for draw i
    idx = (u[:, None] >= cum_rows).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def _cdf(mat: np.ndarray) -> np.ndarray:
    cum = np.cumsum(mat, axis=-1)
    return cum / cum[..., -1:]


def sample_corpus(model: HmmModel, n_sequences: int, length: int, seed) -> np.ndarray:
    """Ancestral sampling of ``n_sequences`` sequences; returns an int array [n, length]."""
    if length < 1:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    init_cdf = _cdf(model.initial)
    trans_cdf = _cdf(model.transition)
    emit_cdf = _cdf(model.emission)
    out = np.empty((n_sequences, length), dtype=np.int64)
    z = _draw(np.broadcast_to(init_cdf, (n_sequences, init_cdf.size)), rng.random(n_sequences))
    for t in range(length):
        if t:
            z = _draw(trans_cdf[z], rng.random(n_sequences))
        out[:, t] = _draw(emit_cdf[z], rng.random(n_sequences))
    return out


def sample_sequence(model: HmmModel, length: int, seed) -> list[int]:
    return sample_corpus(model, 1, length, seed)[0].tolist()

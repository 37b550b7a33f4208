"""Compression schemes for probability matrices.

Fixed-point linear quantization maps ``p`` to the level
``k = clip(round(p * (2**b - 1)), 0, 2**b - 1)`` and dequantizes to
``k / 2**b``.  Norm-Q stores exactly the same levels but reconstructs each
row as ``(k + eps * 2**b) / sum(k + eps * 2**b)``, so every row is a valid
distribution and nothing beyond the levels and a scalar ``eps`` is stored.

Rounding ties go away from zero everywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .hmm import HmmModel

DEFAULT_EPSILON = 1e-12
MIN_BITS, MAX_BITS = 1, 24

SCHEMES = ("linear-fixed", "norm-q", "kmeans")


class ConfigurationError(ValueError):
    pass


class DomainError(ValueError):
    pass


class QuantizedFormatError(ValueError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ConfigurationError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def _as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DomainError(f"expected a matrix, got shape {arr.shape}")
    return arr


@dataclass
class QuantizedMatrix:
    """Sparse b-bit levels in CSR layout.

    ``indptr`` has ``rows + 1`` entries; row ``i`` owns ``indices[indptr[i]:indptr[i+1]]``
    (strictly increasing columns) and the matching nonzero ``levels``.
    For ``kmeans`` the levels index ``codebook`` and omitted entries take
    ``codebook[0]``, the smallest centroid.
    """

    rows: int
    cols: int
    bits: int
    indptr: np.ndarray
    indices: np.ndarray
    levels: np.ndarray
    scheme: str
    epsilon: float = DEFAULT_EPSILON
    codebook: Optional[np.ndarray] = None

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.codebook is not None:
            self.codebook = np.asarray(self.codebook, dtype=np.float64)

    @property
    def nnz(self) -> int:
        return int(self.levels.size)

    @property
    def total(self) -> int:
        return self.rows * self.cols

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.indptr)

    def level_matrix(self) -> np.ndarray:
        """Dense integer levels, zeros where nothing is stored."""
        out = np.zeros((self.rows, self.cols), dtype=np.int64)
        row_ids = np.repeat(np.arange(self.rows), self.row_nnz())
        out[row_ids, self.indices] = self.levels
        return out

    def check(self) -> None:
        """Raise :class:`QuantizedFormatError` if the structure is corrupt."""
        if self.scheme not in SCHEMES:
            raise QuantizedFormatError(f"unknown scheme {self.scheme!r}")
        _check_bits(self.bits)
        if self.indptr.shape != (self.rows + 1,) or self.indptr[0] != 0:
            raise QuantizedFormatError("row pointer table has the wrong length or start")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != self.levels.size:
            raise QuantizedFormatError("row pointers are not monotone or do not cover the levels")
        if self.indices.size != self.levels.size:
            raise QuantizedFormatError("column and level arrays differ in length")
        if self.levels.size and (self.levels.min() < 1 or self.levels.max() > (1 << self.bits) - 1):
            raise QuantizedFormatError(f"stored level outside [1, {(1 << self.bits) - 1}]")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise QuantizedFormatError("column index out of range")
        for i in range(self.rows):
            cols = self.indices[self.indptr[i] : self.indptr[i + 1]]
            if cols.size > 1 and np.any(np.diff(cols) <= 0):
                raise QuantizedFormatError(f"column indices not strictly increasing in row {i}")
        if self.scheme == "kmeans":
            if self.codebook is None or self.codebook.size == 0:
                raise QuantizedFormatError("kmeans matrix without codebook")
            if self.codebook.size > (1 << self.bits) or np.any(self.codebook < 0):
                raise QuantizedFormatError("codebook too long or negative")
            if self.levels.size and self.levels.max() >= self.codebook.size:
                raise QuantizedFormatError("level beyond codebook length")
        elif self.codebook is not None:
            raise QuantizedFormatError(f"{self.scheme} matrices carry no codebook")

    def value_sets(self) -> list[np.ndarray]:
        """Distinct reconstructed values per row (the row's effective cookbook)."""
        return [np.unique(r) for r in dequantize(self)]


def _from_levels(levels: np.ndarray, bits: int, scheme: str, epsilon: float, codebook=None) -> QuantizedMatrix:
    rows, cols = levels.shape
    nz_rows, nz_cols = np.nonzero(levels)
    indptr = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(nz_rows, minlength=rows), out=indptr[1:])
    return QuantizedMatrix(
        rows, cols, bits, indptr, nz_cols, levels[nz_rows, nz_cols], scheme, epsilon, codebook
    )


# ---------------------------------------------------------------------------
# Row normalization and pruning
# ---------------------------------------------------------------------------


def normalize_rows(matrix, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """``(m_ij + eps) / sum_j (m_ij + eps)`` followed by an exact renormalization pass."""
    m = _as_matrix(matrix)
    if not np.all(np.isfinite(m)):
        raise DomainError("entries must be finite")
    if np.any(m < 0):
        raise DomainError("entries must be non-negative")
    out = m + epsilon
    out /= out.sum(axis=1, keepdims=True)
    out /= out.sum(axis=1, keepdims=True)
    return out


def prune_ratio(matrix, ratio: float, renormalize: bool = False, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Zero the ``floor(ratio * size)`` smallest-magnitude entries across the whole matrix."""
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"ratio must lie in [0, 1), got {ratio}")
    m = _as_matrix(matrix)
    out = m.copy()
    n_prune = int(np.floor(ratio * m.size))
    if n_prune:
        order = np.argsort(np.abs(m), axis=None, kind="stable")
        out.flat[order[:n_prune]] = 0.0
    if renormalize:
        out = normalize_rows(out, epsilon)
    return out


# ---------------------------------------------------------------------------
# Fixed-point linear quantization and Norm-Q
# ---------------------------------------------------------------------------


def linear_levels(matrix, bits: int) -> np.ndarray:
    bits = _check_bits(bits)
    m = _as_matrix(matrix)
    top = (1 << bits) - 1
    return np.clip(round_half_away(m * top), 0, top).astype(np.int64)


def quantize_linear_fixed(matrix, bits: int) -> QuantizedMatrix:
    return _from_levels(linear_levels(matrix, bits), int(bits), "linear-fixed", DEFAULT_EPSILON)


def norm_q(matrix, bits: int, epsilon: float = DEFAULT_EPSILON) -> QuantizedMatrix:
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    return _from_levels(linear_levels(matrix, bits), int(bits), "norm-q", float(epsilon))


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    q.check()
    levels = q.level_matrix()
    if q.scheme == "linear-fixed":
        return levels / float(1 << q.bits)
    if q.scheme == "norm-q":
        shifted = levels + q.epsilon * float(1 << q.bits)
        out = shifted / shifted.sum(axis=1, keepdims=True)
        out /= out.sum(axis=1, keepdims=True)
        return out
    return q.codebook[levels]


# ---------------------------------------------------------------------------
# Weighted 1-D K-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    codebook: np.ndarray
    assignment: np.ndarray  # cluster index per distinct value
    values: np.ndarray  # sorted distinct values
    weights: np.ndarray  # multiplicity of each distinct value
    distortions: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def distortion(self) -> float:
        return weighted_distortion(self.values, self.weights, self.codebook[self.assignment])


def weighted_distortion(values, weights, reconstruction) -> float:
    d = np.asarray(values) - np.asarray(reconstruction)
    return float(np.sum(np.asarray(weights) * d * d))


def _quantile_init(values: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """k distinct starting centroids at the weighted quantiles (i + 1/2) / k."""
    n = values.size
    cum = np.cumsum(weights) / weights.sum()
    targets = (np.arange(k) + 0.5) / k
    idx = np.searchsorted(cum, targets, side="left")
    idx = np.minimum(idx, n - 1)
    # force strictly increasing indices so heavy point masses cannot collapse centroids
    for i in range(1, k):
        idx[i] = max(idx[i], idx[i - 1] + 1)
    for i in range(k - 1, -1, -1):
        idx[i] = min(idx[i], n - k + i)
        if i < k - 1:
            idx[i] = min(idx[i], idx[i + 1] - 1)
    return values[idx].astype(np.float64)


#: Largest k * n**2 for which the exact dynamic-programming initialization is used.
EXACT_INIT_BUDGET = 5e7


def _optimal_init(values: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """Globally optimal 1-D clustering of sorted values by DP over contiguous segments.

    Optimal 1-D clusters are intervals of the sorted values, so
    ``D[m][j] = min_i D[m-1][i] + cost(i, j)`` over segment end points.
    """
    n = values.size
    W = np.concatenate([[0.0], np.cumsum(weights)])
    S1 = np.concatenate([[0.0], np.cumsum(weights * values)])
    S2 = np.concatenate([[0.0], np.cumsum(weights * values * values)])
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = W[j] - W[i]
        s = S1[j] - S1[i]
        cost = np.where(j > i, np.maximum(S2[j] - S2[i] - s * s / w, 0.0), np.inf)
    D = cost[0].copy()  # one cluster covering values[:j]
    back = []
    for _ in range(1, k):
        total = D[:, None] + cost
        arg = np.argmin(total, axis=0)
        back.append(arg)
        D = total[arg, np.arange(n + 1)]
    bounds = [n]
    for arg in reversed(back):
        bounds.append(int(arg[bounds[-1]]))
    bounds.append(0)
    bounds.reverse()
    return np.array([s_ / w_ for s_, w_ in
                     ((S1[b] - S1[a], W[b] - W[a]) for a, b in zip(bounds[:-1], bounds[1:]))])


def _assign(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # centroids sorted: nearest one is found from the midpoints; ties go to the lower centroid
    mids = (centroids[1:] + centroids[:-1]) / 2.0
    return np.searchsorted(mids, values, side="left")


def weighted_kmeans_1d(values, weights, k: int, max_iters: int = 100) -> KMeansResult:
    """Lloyd iteration on a weighted multiset of scalars."""
    order = np.argsort(values, kind="stable")
    values = np.asarray(values, dtype=np.float64)[order]
    weights = np.asarray(weights, dtype=np.float64)[order]
    if k >= values.size:
        codebook = values.copy()
        assignment = np.arange(values.size)
        return KMeansResult(codebook, assignment, values, weights, [0.0], 0)

    if k * values.size**2 <= EXACT_INIT_BUDGET:
        centroids = _optimal_init(values, weights, k)
    else:
        centroids = _quantile_init(values, weights, k)
    assignment = _assign(values, centroids)
    history = [weighted_distortion(values, weights, centroids[assignment])]
    it = 0
    for it in range(1, max_iters + 1):
        sums = np.bincount(assignment, weights=weights * values, minlength=k)
        mass = np.bincount(assignment, weights=weights, minlength=k)
        centroids = np.where(mass > 0, sums / np.where(mass > 0, mass, 1.0), centroids)
        new_assignment = _assign(values, centroids)
        history.append(weighted_distortion(values, weights, centroids[new_assignment]))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return KMeansResult(centroids, assignment, values, weights, history, it)


def kmeans_quantize(matrix, bits: int, max_iters: int = 100, seed: int = 0) -> QuantizedMatrix:
    """Cluster every entry of ``matrix`` onto at most ``2**bits`` centroids.

    Initialization is deterministic (exact optimum for small inputs, weighted
    quantiles otherwise); ``seed`` is accepted so every quantizer shares one
    call shape.
    """
    bits = _check_bits(bits)
    m = _as_matrix(matrix)
    if np.any(m < 0) or np.any(m > 1):
        raise DomainError("entries must lie in [0, 1]")
    values, inverse, counts = np.unique(m, return_inverse=True, return_counts=True)
    res = weighted_kmeans_1d(values, counts, 1 << bits, max_iters)
    # np.unique sorts, so res.values == values and the assignment lines up with `inverse`
    used = np.unique(res.assignment)
    remap = np.full(res.codebook.size, -1)
    remap[used] = np.arange(used.size)
    codebook = np.maximum(res.codebook[used], 0.0)
    levels = remap[res.assignment][inverse.reshape(m.shape)]
    return _from_levels(levels, bits, "kmeans", DEFAULT_EPSILON, codebook)


# ---------------------------------------------------------------------------
# Layer-wise integer quantization (baseline)
# ---------------------------------------------------------------------------


def layerwise_int_quantize(values, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric integer quantization with scale ``(2**b - 1) / max|v|`` and zero point 0."""
    bits = _check_bits(bits)
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("values must be finite")
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return v.astype(np.int64), 1.0
    scale = ((1 << bits) - 1) / peak
    top = (1 << bits) - 1
    return np.clip(round_half_away(v * scale), -top, top).astype(np.int64), scale


def layerwise_int_dequantize(ints, scale: float) -> np.ndarray:
    return np.asarray(ints, dtype=np.float64) / scale


# ---------------------------------------------------------------------------
# Distances and sparsity
# ---------------------------------------------------------------------------


def kl_divergence_rows(P, Q, epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, float]:
    """Row-wise ``D_KL(P || Q)`` with zero entries of ``Q`` floored at ``epsilon``."""
    p, q = _as_matrix(P), _as_matrix(Q)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {q.shape}")
    q_eff = np.where(q > 0, q, epsilon)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q_eff)), 0.0)
    # the epsilon floor can lift sum(q) above 1 by cols * epsilon
    kl = np.maximum(terms.sum(axis=1), 0.0)
    return kl, float(kl.mean())


@dataclass(frozen=True)
class SparsityReport:
    name: str
    total: int
    zeros: int
    bits: Optional[int] = None

    @property
    def fraction(self) -> float:
        return self.zeros / self.total if self.total else 0.0


def sparsity(m: Union[np.ndarray, QuantizedMatrix], name: str = "matrix") -> SparsityReport:
    if isinstance(m, QuantizedMatrix):
        return SparsityReport(name, m.total, m.total - m.nnz, m.bits)
    arr = _as_matrix(m)
    return SparsityReport(name, int(arr.size), int(np.count_nonzero(arr == 0.0)))


# ---------------------------------------------------------------------------
# Whole-model helpers
# ---------------------------------------------------------------------------

MATRIX_NAMES = ("initial", "transition", "emission")


@dataclass
class QuantizedModel:
    """The three quantized matrices of an HMM (initial stored as a 1-row matrix)."""

    initial: QuantizedMatrix
    transition: QuantizedMatrix
    emission: QuantizedMatrix

    def matrices(self) -> dict[str, QuantizedMatrix]:
        return {"initial": self.initial, "transition": self.transition, "emission": self.emission}

    @property
    def hidden_size(self) -> int:
        return self.transition.rows

    @property
    def vocab_size(self) -> int:
        return self.emission.cols

    def to_model(self, renormalize: bool = False) -> HmmModel:
        """Dequantized HMM.  ``renormalize`` applies :func:`normalize_rows` with each matrix's eps."""
        mats = {}
        for name, q in self.matrices().items():
            d = dequantize(q)
            if renormalize and q.scheme != "norm-q":
                d = normalize_rows(d, q.epsilon)
            mats[name] = d
        return HmmModel(mats["initial"][0], mats["transition"], mats["emission"])


def quantize_model(model: HmmModel, scheme: str, bits: int, epsilon: float = DEFAULT_EPSILON,
                   max_iters: int = 100, seed: int = 0) -> QuantizedModel:
    qs = {}
    for name, mat in model.matrices().items():
        if scheme == "norm-q":
            qs[name] = norm_q(mat, bits, epsilon)
        elif scheme == "linear-fixed":
            qs[name] = quantize_linear_fixed(mat, bits)
        elif scheme == "kmeans":
            q = kmeans_quantize(mat, bits, max_iters, seed)
            q.epsilon = float(epsilon)
            qs[name] = q
        else:
            raise ConfigurationError(f"unknown scheme {scheme!r}")
    return QuantizedModel(**qs)


def prune_model(model: HmmModel, ratio: float, renormalize: bool = False,
                epsilon: float = DEFAULT_EPSILON) -> HmmModel:
    """Ratio-prune each matrix with its own global threshold."""
    m = {name: prune_ratio(mat, ratio, renormalize, epsilon) for name, mat in model.matrices().items()}
    return HmmModel(m["initial"][0], m["transition"], m["emission"])

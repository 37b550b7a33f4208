"""Binary model files, corpus files and CSV export.

Model file layout (all little-endian)::

    header      magic "NQHM" | version u16 | precision u8 | reserved u8
                | hidden_size u64 | vocab_size u64                      24 bytes
    dense       initial, transition, emission as row-major f64
    quantized   for initial, transition, emission in that order:
                  scheme u8 | bits u8 | reserved u16 | rows u64 | cols u64
                  | codebook_len u32                                      24 bytes
                  codebook_len x f64
                  (rows + 1) x u64 row offsets, relative to the first row record
                  per row: count u32 | count x u32 columns
                           | levels, b bits each, MSB first, padded to a byte
                  epsilon f64

Norm-Q and linear-fixed matrices carry no codebook.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .compression import QuantizedFormatError, QuantizedMatrix, QuantizedModel
from .hmm import HmmModel
from .training import Corpus

MAGIC = b"NQHM"
VERSION = 1
PRECISION_DENSE = 0
PRECISION_QUANT = 1

_HEADER = struct.Struct("<4sHBBQQ")
_MATRIX_HEADER = struct.Struct("<BBHQQI")
_SCHEME_CODES = {"linear-fixed": 0, "norm-q": 1, "kmeans": 2}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_CODES.items()}


class FormatError(ValueError):
    """Malformed model file.  ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CorpusParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# Sizes
# ---------------------------------------------------------------------------


def _row_bytes(nnz: np.ndarray, bits: int) -> np.ndarray:
    nnz = np.asarray(nnz, dtype=np.int64)
    return 4 + 4 * nnz + (bits * nnz + 7) // 8


def matrix_block_size(q: QuantizedMatrix) -> int:
    cb = 0 if q.codebook is None else q.codebook.size
    return (_MATRIX_HEADER.size + 8 * cb + 8 * (q.rows + 1)
            + int(_row_bytes(q.row_nnz(), q.bits).sum()) + 8)


def quantized_file_size(qmodel: QuantizedModel) -> int:
    """Exact size in bytes of :func:`save_quantized` output."""
    return _HEADER.size + sum(matrix_block_size(q) for q in qmodel.matrices().values())


def dense_file_size(model: HmmModel) -> int:
    n, v = model.hidden_size, model.vocab_size
    return _HEADER.size + 8 * (n + n * n + n * v)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def pack_levels(levels: np.ndarray, bits: int) -> bytes:
    """b-bit big-endian bit packing, padded with zero bits to a whole byte."""
    if levels.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitarr = ((np.asarray(levels, dtype=np.int64)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitarr.ravel()).tobytes()


def unpack_levels(buf: bytes, count: int, bits: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bitarr = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[: count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return bitarr.astype(np.int64) @ weights


def _matrix_bytes(q: QuantizedMatrix) -> bytes:
    q.check()
    cb = q.codebook if q.codebook is not None else np.zeros(0)
    out = io.BytesIO()
    out.write(_MATRIX_HEADER.pack(_SCHEME_CODES[q.scheme], q.bits, 0, q.rows, q.cols, cb.size))
    out.write(cb.astype("<f8").tobytes())
    records = []
    for i in range(q.rows):
        lo, hi = q.indptr[i], q.indptr[i + 1]
        records.append(
            struct.pack("<I", hi - lo)
            + q.indices[lo:hi].astype("<u4").tobytes()
            + pack_levels(q.levels[lo:hi], q.bits)
        )
    offsets = np.zeros(q.rows + 1, dtype="<u8")
    np.cumsum([len(r) for r in records], out=offsets[1:])
    out.write(offsets.tobytes())
    for r in records:
        out.write(r)
    out.write(struct.pack("<d", q.epsilon))
    return out.getvalue()


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_model(path, model: HmmModel) -> None:
    header = _HEADER.pack(MAGIC, VERSION, PRECISION_DENSE, 0, model.hidden_size, model.vocab_size)
    payload = b"".join(m.astype("<f8").tobytes() for m in (model.initial, model.transition, model.emission))
    _write_atomic(path, header + payload)


def save_quantized(path, qmodel: QuantizedModel) -> None:
    header = _HEADER.pack(MAGIC, VERSION, PRECISION_QUANT, 0, qmodel.hidden_size, qmodel.vocab_size)
    _write_atomic(path, header + b"".join(_matrix_bytes(q) for q in qmodel.matrices().values()))


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype, count=count)


def _read_header(r: _Reader):
    magic, version, precision, _, n, v = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if precision not in (PRECISION_DENSE, PRECISION_QUANT):
        raise FormatError(f"unknown precision tag {precision}", 6)
    if n == 0 or v == 0:
        raise FormatError("zero hidden or vocab size", 8)
    return precision, int(n), int(v)


def _read_matrix(r: _Reader, name: str) -> QuantizedMatrix:
    start = r.pos
    code, bits, _, rows, cols, cb_len = r.unpack(_MATRIX_HEADER, f"{name} header")
    if code not in _SCHEME_NAMES:
        raise FormatError(f"unknown scheme code {code} in {name}", start)
    codebook = r.array("<f8", cb_len, f"{name} codebook").astype(np.float64) if cb_len else None
    offsets = r.array("<u8", rows + 1, f"{name} row offsets").astype(np.int64)
    base = r.pos
    if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
        raise FormatError(f"row offsets of {name} are not monotone", base - 8 * (rows + 1))
    indptr = np.zeros(rows + 1, dtype=np.int64)
    cols_out, levels_out = [], []
    for i in range(rows):
        if r.pos - base != offsets[i]:
            raise FormatError(f"row {i} of {name} does not start at its recorded offset", r.pos)
        (count,) = struct.unpack("<I", r.take(4, f"{name} row {i} count"))
        c = r.array("<u4", count, f"{name} row {i} columns").astype(np.int64)
        lv = unpack_levels(r.take((bits * count + 7) // 8, f"{name} row {i} levels"), count, bits)
        cols_out.append(c)
        levels_out.append(lv)
        indptr[i + 1] = indptr[i] + count
    if r.pos - base != offsets[rows]:
        raise FormatError(f"row block of {name} ends away from its recorded length", r.pos)
    (eps,) = struct.unpack("<d", r.take(8, f"{name} epsilon"))
    q = QuantizedMatrix(
        int(rows), int(cols), int(bits), indptr,
        np.concatenate(cols_out) if cols_out else np.zeros(0, np.int64),
        np.concatenate(levels_out) if levels_out else np.zeros(0, np.int64),
        _SCHEME_NAMES[code], eps, codebook,
    )
    try:
        q.check()
    except (QuantizedFormatError, ValueError) as exc:
        raise FormatError(f"invalid {name} matrix: {exc}", start) from None
    return q


def load_any(path) -> Union[HmmModel, QuantizedModel]:
    """Load a dense or quantized model file, whichever it is."""
    r = _Reader(Path(path).read_bytes())
    precision, n, v = _read_header(r)
    if precision == PRECISION_DENSE:
        init = r.array("<f8", n, "initial").astype(np.float64)
        trans = r.array("<f8", n * n, "transition").astype(np.float64).reshape(n, n)
        emit = r.array("<f8", n * v, "emission").astype(np.float64).reshape(n, v)
        out: Union[HmmModel, QuantizedModel] = HmmModel(init, trans, emit)
    else:
        mats = [_read_matrix(r, name) for name in ("initial", "transition", "emission")]
        expected = [(1, n), (n, n), (n, v)]
        for q, shape, name in zip(mats, expected, ("initial", "transition", "emission")):
            if (q.rows, q.cols) != shape:
                raise FormatError(f"{name} shape {(q.rows, q.cols)} does not match header {shape}", r.pos)
        out = QuantizedModel(*mats)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after payload", r.pos)
    return out


def load_model(path) -> HmmModel:
    m = load_any(path)
    if not isinstance(m, HmmModel):
        raise FormatError("file holds a quantized model; use load_quantized", 6)
    return m


def load_quantized(path) -> QuantizedModel:
    m = load_any(path)
    if not isinstance(m, QuantizedModel):
        raise FormatError("file holds a dense model; use load_model", 6)
    return m


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def parse_corpus(text: str, vocab_size: Optional[int] = None, n_chunks: int = 1) -> Corpus:
    """One sequence per line, space-separated decimal token IDs.  Blank lines are skipped."""
    seqs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            toks = [int(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not p.lstrip("+-").isdigit())
            raise CorpusParseError(f"non-numeric token {bad!r}", lineno) from None
        if min(toks) < 0:
            raise CorpusParseError("negative token ID", lineno)
        if vocab_size is not None and max(toks) >= vocab_size:
            raise CorpusParseError(f"token ID {max(toks)} out of range for vocab size {vocab_size}", lineno)
        seqs.append(np.array(toks, dtype=np.int64))
    if not seqs:
        raise CorpusParseError("empty corpus")
    if vocab_size is None:
        vocab_size = int(max(s.max() for s in seqs)) + 1
    if n_chunks > len(seqs):
        raise CorpusParseError(f"{len(seqs)} sequences cannot fill {n_chunks} chunks")
    return Corpus(seqs, vocab_size, n_chunks)


def load_corpus(path, vocab_size: Optional[int] = None, n_chunks: int = 1) -> Corpus:
    return parse_corpus(Path(path).read_text(), vocab_size, n_chunks)


def save_corpus(path, sequences: Iterable[Sequence[int]]) -> None:
    lines = [" ".join(str(int(t)) for t in s) for s in sequences]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """CSV with a fixed header; floats written with ``repr`` so output is byte-stable."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

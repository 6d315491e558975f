"""Fixed-point arithmetic over the ring Z_2^l.

Values are stored as l-bit unsigned words (always in uint64 storage, masked to
l bits) and real numbers are embedded by two's-complement fixed-point
encoding: encode(x) = round(x * 2^f) mod 2^l.  All matrix arithmetic wraps
mod 2^l, which is exactly the algebra additive secret sharing needs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

_SUPPORTED_BITS = (8, 16, 32, 64)


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class FixedPointOverflowError(OverflowError):
    """A real value does not fit the representable fixed-point range."""


@dataclass(frozen=True)
class FixedPointConfig:
    """Width of the ring (total bits) and position of the binary point."""

    total_bits: int = 64
    frac_bits: int = 20

    def __post_init__(self):
        if self.total_bits not in _SUPPORTED_BITS:
            raise ValueError(f"total_bits must be one of {_SUPPORTED_BITS}")
        if not 0 < self.frac_bits < self.total_bits:
            raise ValueError("frac_bits must satisfy 0 < f < total_bits")

    @property
    def modulus(self) -> int:
        return 1 << self.total_bits

    @property
    def mask(self) -> int:
        return (1 << self.total_bits) - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_abs(self) -> float:
        """Strict bound on |x| for encodable reals: 2^(l-f-1)."""
        return float(1 << (self.total_bits - self.frac_bits - 1))


DEFAULT_CONFIG = FixedPointConfig()


def _mask_of(bits: int) -> np.uint64:
    return np.uint64((1 << bits) - 1)


@dataclass(eq=False)
class RingMatrix:
    """Dense row-major matrix of l-bit ring words (uint64 storage)."""

    words: np.ndarray
    bits: int = 64

    def __post_init__(self):
        if self.bits not in _SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {_SUPPORTED_BITS}")
        w = np.ascontiguousarray(self.words, dtype=np.uint64)
        if w.ndim != 2:
            raise ValueError("RingMatrix is 2-D")
        object.__setattr__(self, "words", w & _mask_of(self.bits))

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    @property
    def cols(self) -> int:
        return self.words.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.words.shape

    @classmethod
    def zeros(cls, rows: int, cols: int, bits: int = 64) -> "RingMatrix":
        return cls(np.zeros((rows, cols), dtype=np.uint64), bits)

    @classmethod
    def eye(cls, n: int, bits: int = 64) -> "RingMatrix":
        return cls(np.eye(n, dtype=np.uint64), bits)

    def _check(self, other: "RingMatrix", matmul: bool = False):
        if self.bits != other.bits:
            raise ShapeMismatchError("ring width mismatch")
        if matmul:
            if self.cols != other.rows:
                raise ShapeMismatchError(
                    f"matmul shapes {self.shape} x {other.shape}")
        elif self.shape != other.shape:
            raise ShapeMismatchError(f"shapes {self.shape} vs {other.shape}")

    def __add__(self, other: "RingMatrix") -> "RingMatrix":
        self._check(other)
        return RingMatrix(self.words + other.words, self.bits)

    def __sub__(self, other: "RingMatrix") -> "RingMatrix":
        self._check(other)
        return RingMatrix(self.words - other.words, self.bits)

    def __neg__(self) -> "RingMatrix":
        return RingMatrix(-self.words, self.bits)

    def __mul__(self, other: "RingMatrix") -> "RingMatrix":
        """Elementwise (Hadamard) product mod 2^l."""
        self._check(other)
        return RingMatrix(self.words * other.words, self.bits)

    def __matmul__(self, other: "RingMatrix") -> "RingMatrix":
        self._check(other, matmul=True)
        return RingMatrix(self.words @ other.words, self.bits)

    def scale_by(self, c: int) -> "RingMatrix":
        """Multiply by a public ring constant."""
        return RingMatrix(self.words * np.uint64(c & ((1 << self.bits) - 1)),
                          self.bits)

    def transpose(self) -> "RingMatrix":
        return RingMatrix(self.words.T.copy(), self.bits)

    def equals(self, other: "RingMatrix") -> bool:
        return (self.bits == other.bits and self.shape == other.shape
                and bool(np.all(self.words == other.words)))

    def to_signed(self) -> np.ndarray:
        """Two's-complement view as int64."""
        if self.bits == 64:
            return self.words.view(np.int64).copy()
        half = np.uint64(1 << (self.bits - 1))
        out = self.words.astype(np.int64)
        return np.where(self.words >= half, out - (1 << self.bits), out)

    def serialize(self) -> bytes:
        """8-byte LE rows, cols, then rows*cols little-endian l/8-byte words."""
        dt = np.dtype(f"<u{self.bits // 8}")
        body = np.ascontiguousarray(self.words.astype(dt)).tobytes()
        return struct.pack("<QQ", self.rows, self.cols) + body

    @classmethod
    def deserialize(cls, data: bytes, bits: int = 64) -> "RingMatrix":
        rows, cols = struct.unpack_from("<QQ", data, 0)
        dt = np.dtype(f"<u{bits // 8}")
        need = 16 + rows * cols * dt.itemsize
        if len(data) < need:
            raise ValueError("truncated RingMatrix payload")
        w = np.frombuffer(data, dtype=dt, count=rows * cols, offset=16)
        return cls(w.astype(np.uint64).reshape(rows, cols), bits)


def mat_op(a: RingMatrix, b: RingMatrix, op: str) -> RingMatrix:
    """add / sub elementwise, mul = matrix product, all mod 2^l."""
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a @ b
    raise ValueError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# fixed-point encoding

def encode_fixed(x, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Encode real(s) as ring word(s): round(x * 2^f) mod 2^l.

    Raises FixedPointOverflowError when |x| >= 2^(l-f-1); multiplying a float
    by a power of two is exact, so rounding happens on the true value.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= cfg.max_abs):
        raise FixedPointOverflowError(
            f"|x| must be < 2^{cfg.total_bits - cfg.frac_bits - 1}")
    scaled = np.rint(arr * float(cfg.scale)).astype(np.int64)
    words = scaled.astype(np.uint64) & _mask_of(cfg.total_bits)
    if np.isscalar(x) or arr.ndim == 0:
        return int(words)
    return words


def decode_fixed(e, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Interpret word(s) as two's complement and divide by 2^f."""
    raw = np.asarray(e)
    arr = np.atleast_1d(raw).astype(np.uint64) & _mask_of(cfg.total_bits)
    if cfg.total_bits == 64:
        signed = np.ascontiguousarray(arr).view(np.int64)
    else:
        signed = arr.astype(np.int64)
        half = 1 << (cfg.total_bits - 1)
        signed = np.where(signed >= half, signed - cfg.modulus, signed)
    out = signed.astype(np.float64) / float(cfg.scale)
    if raw.ndim == 0:
        return float(out[0])
    return out.reshape(raw.shape)


def encode_matrix(x: np.ndarray, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingMatrix:
    return RingMatrix(encode_fixed(np.atleast_2d(np.asarray(x, dtype=np.float64)), cfg),
                      cfg.total_bits)


def decode_matrix(m: RingMatrix, cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    if m.bits != cfg.total_bits:
        raise ShapeMismatchError("config width does not match matrix width")
    return m.to_signed().astype(np.float64) / float(cfg.scale)


# ---------------------------------------------------------------------------
# pseudorandom generation (AES-128 in counter mode)

def _keystream(seed: bytes, counter: int, nbytes: int) -> bytes:
    if len(seed) != 16:
        raise ValueError("seed must be 16 bytes")
    # each counter value owns a disjoint 2^64-block segment of the keystream
    nonce = struct.pack(">QQ", counter & ((1 << 64) - 1), 0)
    enc = Cipher(algorithms.AES(seed), modes.CTR(nonce)).encryptor()
    return enc.update(bytes(nbytes))


def prg_matrix(seed: bytes, counter: int, rows: int, cols: int,
               bits: int = 64) -> RingMatrix:
    """Deterministic uniform matrix from (seed, counter)."""
    raw = _keystream(seed, counter, rows * cols * 8)
    w = np.frombuffer(raw, dtype="<u8").reshape(rows, cols)
    return RingMatrix(w.copy(), bits)


class RingSampler:
    """Stateful deterministic sampler over a seeded AES-CTR keystream.

    Each draw consumes one counter value, so interleaved draws of different
    shapes never overlap.  derive() gives an independent child stream.
    """

    def __init__(self, seed: bytes):
        if len(seed) != 16:
            raise ValueError("seed must be 16 bytes")
        self.seed = seed
        self._counter = 0

    def _next(self, nbytes: int) -> bytes:
        out = _keystream(self.seed, self._counter, nbytes)
        self._counter += 1
        return out

    def derive(self, tag: str) -> "RingSampler":
        return RingSampler(hashlib.sha256(self.seed + tag.encode()).digest()[:16])

    def uniform(self, rows: int, cols: int, bits: int = 64) -> RingMatrix:
        raw = self._next(rows * cols * 8)
        w = np.frombuffer(raw, dtype="<u8").reshape(rows, cols)
        return RingMatrix(w.copy(), bits)

    def words(self, n: int, bits: int = 64) -> np.ndarray:
        raw = self._next(n * 8)
        return np.frombuffer(raw, dtype="<u8").copy() & _mask_of(bits)

    def bit_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self._next((n + 7) // 8)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                             bitorder="little")[:n]
        return bits.reshape(shape)

    def randbytes(self, n: int) -> bytes:
        return self._next(n)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound); 64 guard bits keep mod-bias ~2^-64."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        nbytes = (bound.bit_length() + 64 + 7) // 8
        return int.from_bytes(self._next(nbytes), "little") % bound


# ---------------------------------------------------------------------------
# sparse matrices (CSR over ring words)

@dataclass(eq=False)
class SparsePlainMatrix:
    """CSR matrix of ring words; stores no zeros, indices sorted per row."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    bits: int = 64

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.uint64) & _mask_of(self.bits)
        if self.indptr.shape != (self.rows + 1,):
            raise ValueError("indptr must have rows+1 entries")
        if self.indices.shape != self.values.shape:
            raise ValueError("indices/values length mismatch")
        for r in range(self.rows):
            s, e = self.indptr[r], self.indptr[r + 1]
            row_idx = self.indices[s:e]
            if row_idx.size and (np.any(np.diff(row_idx) <= 0)
                                 or row_idx[0] < 0 or row_idx[-1] >= self.cols):
                raise ValueError(f"row {r}: column indices not strictly increasing")
        if np.any(self.values == 0):
            raise ValueError("stored zero value")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_dense(cls, m: RingMatrix) -> "SparsePlainMatrix":
        rr, cc = np.nonzero(m.words)
        order = np.lexsort((cc, rr))
        rr, cc = rr[order], cc[order]
        indptr = np.zeros(m.rows + 1, dtype=np.int64)
        np.add.at(indptr, rr + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(m.rows, m.cols, indptr, cc.astype(np.int64),
                   m.words[rr, cc], m.bits)

    def to_dense(self) -> RingMatrix:
        w = np.zeros((self.rows, self.cols), dtype=np.uint64)
        for r in range(self.rows):
            s, e = self.indptr[r], self.indptr[r + 1]
            w[r, self.indices[s:e]] = self.values[s:e]
        return RingMatrix(w, self.bits)

    def transpose(self) -> "SparsePlainMatrix":
        return SparsePlainMatrix.from_dense(self.to_dense().transpose())

    def serialize(self) -> bytes:
        dt = np.dtype(f"<u{self.bits // 8}")
        parts = [struct.pack("<QQQ", self.rows, self.cols, self.nnz),
                 self.indptr.astype("<u8").tobytes(),
                 self.indices.astype("<u8").tobytes(),
                 self.values.astype(dt).tobytes()]
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes, bits: int = 64) -> "SparsePlainMatrix":
        rows, cols, nnz = struct.unpack_from("<QQQ", data, 0)
        off = 24
        indptr = np.frombuffer(data, dtype="<u8", count=rows + 1, offset=off)
        off += (rows + 1) * 8
        indices = np.frombuffer(data, dtype="<u8", count=nnz, offset=off)
        off += nnz * 8
        dt = np.dtype(f"<u{bits // 8}")
        values = np.frombuffer(data, dtype=dt, count=nnz, offset=off)
        return cls(rows, cols, indptr.astype(np.int64), indices.astype(np.int64),
                   values.astype(np.uint64), bits)


def sparse_dense_mul(s: SparsePlainMatrix, d: RingMatrix) -> RingMatrix:
    """s @ d mod 2^l touching only stored nonzeros."""
    if s.bits != d.bits:
        raise ShapeMismatchError("ring width mismatch")
    if s.cols != d.rows:
        raise ShapeMismatchError(f"matmul shapes ({s.rows},{s.cols}) x {d.shape}")
    out = np.zeros((s.rows, d.cols), dtype=np.uint64)
    if s.nnz:
        prods = s.values[:, None] * d.words[s.indices, :]
        nonempty = np.flatnonzero(np.diff(s.indptr) > 0)
        if nonempty.size:
            sums = np.add.reduceat(prods, s.indptr[nonempty], axis=0)
            out[nonempty] = sums
    return RingMatrix(out, s.bits)

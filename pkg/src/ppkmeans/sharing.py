"""Additive secret sharing over Z_2^l and Beaver-triple multiplication.

A value x is split as x = x_A + x_B mod 2^l.  Linear operations are local;
products cost one online round via a precomputed multiplication triple
(U, V, Z=U*V): both parties open E = X-U and F = Y-V concurrently, then
combine locally.  Fixed-point rescaling after a product uses the local
probabilistic shift (error at most one ulp except with probability
|v| * 2^(shift+1-l) per element).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ring import RingMatrix, RingSampler, ShapeMismatchError, _mask_of
from .transport import MSG_SHARE_OPEN, ROLE_A, ROLE_B, Channel


class TripleReuseError(RuntimeError):
    """A multiplication triple was offered twice."""


@dataclass(eq=False)
class AShare:
    """One party's additive share of a ring matrix."""

    owner: str
    m: RingMatrix

    def __post_init__(self):
        if self.owner not in (ROLE_A, ROLE_B):
            raise ValueError("owner must be 'A' or 'B'")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    @property
    def bits(self) -> int:
        return self.m.bits

    def _check(self, other: "AShare"):
        if self.owner != other.owner:
            raise ValueError("mixing shares of different parties")
        if self.m.shape != other.m.shape or self.m.bits != other.m.bits:
            raise ShapeMismatchError("share shapes differ")

    def __add__(self, other: "AShare") -> "AShare":
        self._check(other)
        return AShare(self.owner, self.m + other.m)

    def __sub__(self, other: "AShare") -> "AShare":
        self._check(other)
        return AShare(self.owner, self.m - other.m)

    def __neg__(self) -> "AShare":
        return AShare(self.owner, -self.m)

    def scale_by(self, c: int) -> "AShare":
        return AShare(self.owner, self.m.scale_by(c))

    def slice_cols(self, lo: int, hi: int) -> "AShare":
        return AShare(self.owner, RingMatrix(self.m.words[:, lo:hi].copy(), self.bits))

    def slice_rows(self, lo: int, hi: int) -> "AShare":
        return AShare(self.owner, RingMatrix(self.m.words[lo:hi, :].copy(), self.bits))

    def transpose(self) -> "AShare":
        return AShare(self.owner, self.m.transpose())


def share(x: RingMatrix, rng: RingSampler) -> tuple[AShare, AShare]:
    """Split x into a uniform share pair (A's part, B's part)."""
    a = rng.uniform(x.rows, x.cols, x.bits)
    b = x - a
    return AShare(ROLE_A, a), AShare(ROLE_B, b)


def reconstruct(a: AShare, b: AShare) -> RingMatrix:
    """Local sum of both parties' shares (test/debug utility)."""
    if a.owner == b.owner:
        raise ValueError("need one share from each party")
    if a.shape != b.shape or a.bits != b.bits:
        raise ShapeMismatchError("share shapes differ")
    return a.m + b.m


def public_share(owner: str, m: RingMatrix) -> AShare:
    """This party's share of a public matrix: A holds it, B holds zeros."""
    if owner == ROLE_A:
        return AShare(owner, m)
    return AShare(owner, RingMatrix.zeros(m.rows, m.cols, m.bits))


def linear(alpha: int, x: AShare, y: AShare, beta: int = 0) -> AShare:
    """Share of alpha*x + y + beta; the constant beta is added by A only."""
    x._check(y)
    out = x.scale_by(alpha) + y
    if beta and x.owner == ROLE_A:
        b = np.uint64(beta & ((1 << x.bits) - 1))
        out = AShare(x.owner, RingMatrix(out.m.words + b, x.bits))
    return out


def open_share(channel: Channel, a: AShare,
               msg_type: int = MSG_SHARE_OPEN) -> RingMatrix:
    """Reveal a shared matrix to both parties (one symmetric round)."""
    got = channel.exchange(a.m.serialize(), msg_type)
    theirs = RingMatrix.deserialize(got.payload, a.bits)
    return a.m + theirs


@dataclass(eq=False)
class MatrixTriple:
    """Shares of (U, V, Z) with Z = U @ V (or U * V when elementwise)."""

    u: AShare
    v: AShare
    z: AShare
    elementwise: bool = False
    _used: bool = field(default=False, repr=False)

    @property
    def owner(self) -> str:
        return self.u.owner

    def mark_used(self):
        if self._used:
            raise TripleReuseError("multiplication triple already consumed")
        self._used = True


def _open_pair(channel: Channel, e: RingMatrix, f: RingMatrix,
               bits: int) -> tuple[RingMatrix, RingMatrix]:
    payload = e.serialize() + f.serialize()
    got = channel.exchange(payload, MSG_SHARE_OPEN)
    e_theirs = RingMatrix.deserialize(got.payload, bits)
    split = 16 + e.rows * e.cols * (bits // 8)
    f_theirs = RingMatrix.deserialize(got.payload[split:], bits)
    return e + e_theirs, f + f_theirs


def _beaver(channel: Channel, x: AShare, y: AShare, t: MatrixTriple,
            elementwise: bool) -> AShare:
    if t.owner != x.owner or y.owner != x.owner:
        raise ValueError("triple/operand owner mismatch")
    if t.elementwise != elementwise:
        raise ShapeMismatchError("triple kind mismatch")
    if elementwise:
        if not (x.shape == y.shape == t.u.shape == t.v.shape == t.z.shape):
            raise ShapeMismatchError("elementwise triple shape mismatch")
    else:
        if t.u.shape != x.shape or t.v.shape != y.shape:
            raise ShapeMismatchError(
                f"triple shapes {t.u.shape},{t.v.shape} vs operands {x.shape},{y.shape}")
        if x.m.cols != y.m.rows:
            raise ShapeMismatchError("operand shapes not matmul-compatible")
    t.mark_used()
    e_pub, f_pub = _open_pair(channel, (x - t.u).m, (y - t.v).m, x.bits)
    if elementwise:
        out = x.m * f_pub + e_pub * y.m + t.z.m
        if x.owner == ROLE_B:
            out = out - e_pub * f_pub
    else:
        out = x.m @ f_pub + e_pub @ y.m + t.z.m
        if x.owner == ROLE_B:
            out = out - e_pub @ f_pub
    return AShare(x.owner, out)


def beaver_matmul(channel: Channel, x: AShare, y: AShare,
                  t: MatrixTriple) -> AShare:
    """Shared matrix product X @ Y in one online round."""
    return _beaver(channel, x, y, t, elementwise=False)


def beaver_mul(channel: Channel, x: AShare, y: AShare,
               t: MatrixTriple) -> AShare:
    """Shared elementwise product (a batch of 1x1 triples)."""
    return _beaver(channel, x, y, t, elementwise=True)


def truncate(x: AShare, shift: int) -> AShare:
    """Local probabilistic arithmetic shift of the underlying value by 2^shift.

    A shifts its share down; B negates, shifts, negates.  Requires the
    plaintext to satisfy |v| < 2^(l-shift-2); off-by-one ulp possible.
    """
    if not 0 <= shift < x.bits:
        raise ValueError("bad shift")
    w = x.m.words
    s = np.uint64(shift)
    mask = _mask_of(x.bits)
    if x.owner == ROLE_A:
        out = w >> s
    else:
        out = -(((-w) & mask) >> s)  # negate within Z_2^l, not uint64
    return AShare(x.owner, RingMatrix(out, x.bits))

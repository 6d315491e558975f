"""Boolean (XOR) sharing, bit conversions and comparison.

A bit is shared as b = b_A xor b_B.  XOR is local; AND costs one opened
round per circuit layer via bit triples.  Arithmetic-to-boolean conversion
adds the two parties' locally-decomposed shares with a ripple-carry adder
whose carry recurrence c' = (a^c)&(b^c) ^ c needs exactly one AND per
stage, so an l-bit conversion consumes l-1 bit triples per element and the
sign-bit extraction never materializes the full decomposition.

Gate openings within a layer are batched into one frame, so a batch of any
width costs one round per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ring import RingMatrix, ShapeMismatchError
from .sharing import AShare, MatrixTriple, beaver_mul, public_share
from .transport import MSG_SHARE_OPEN, ROLE_A, ROLE_B, Channel


@dataclass(eq=False)
class BShare:
    """One party's XOR share of a bit array (uint8 entries in {0,1})."""

    owner: str
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8) & 1

    @property
    def shape(self):
        return self.bits.shape

    def __xor__(self, other: "BShare") -> "BShare":
        if self.owner != other.owner:
            raise ValueError("mixing shares of different parties")
        if self.bits.shape != other.bits.shape:
            raise ShapeMismatchError("bit shapes differ")
        return BShare(self.owner, self.bits ^ other.bits)


@dataclass(eq=False)
class BitTriple:
    """Shares of bits (u, v, w) with w = u AND v."""

    u: BShare
    v: BShare
    w: BShare
    _used: bool = field(default=False, repr=False)

    @property
    def owner(self) -> str:
        return self.u.owner

    def mark_used(self):
        if self._used:
            raise RuntimeError("bit triple already consumed")
        self._used = True


def bxor(x: BShare, y: BShare) -> BShare:
    """Local XOR of shares; zero communication."""
    return x ^ y


def bnot(x: BShare) -> BShare:
    """Complement: exactly one party (A) flips its share."""
    if x.owner == ROLE_A:
        return BShare(x.owner, x.bits ^ 1)
    return BShare(x.owner, x.bits.copy())


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def _unpack(data: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8),
                        bitorder="little")[:n]
    return arr.reshape(shape)


def band(channel: Channel, x: BShare, y: BShare, t: BitTriple) -> BShare:
    """Secure AND over a batch of gates; one opened round."""
    if x.bits.shape != y.bits.shape:
        raise ShapeMismatchError("bit shapes differ")
    if t.u.bits.shape != x.bits.shape:
        if t.u.bits.size != x.bits.size:
            raise ShapeMismatchError("bit triple shape mismatch")
        t = _reshape_triple(t, x.bits.shape)
    t.mark_used()
    d = x.bits ^ t.u.bits
    e = y.bits ^ t.v.bits
    got = channel.exchange(_pack(d) + _pack(e), MSG_SHARE_OPEN)
    half = len(_pack(d))
    d_pub = d ^ _unpack(got.payload[:half], d.shape)
    e_pub = e ^ _unpack(got.payload[half:], e.shape)
    out = (d_pub & t.v.bits) ^ (e_pub & t.u.bits) ^ t.w.bits
    if x.owner == ROLE_B:
        out = out ^ (d_pub & e_pub)
    return BShare(x.owner, out)


def open_bits(channel: Channel, b: BShare) -> np.ndarray:
    """Reveal a shared bit array to both parties."""
    got = channel.exchange(_pack(b.bits), MSG_SHARE_OPEN)
    return b.bits ^ _unpack(got.payload, b.bits.shape)


def _share_word_bits(x: AShare) -> tuple[BShare, BShare]:
    """Boolean-share this party's own arithmetic share, bit-plane layout.

    Returns (a, b): XOR shares of A's words and of B's words, each with
    shape (l, *x.shape); the holder contributes its bits, the peer zeros.
    """
    l = x.bits
    w = x.m.words.reshape(-1)
    planes = ((w[None, :] >> np.arange(l, dtype=np.uint64)[:, None])
              & np.uint64(1)).astype(np.uint8)
    planes = planes.reshape((l,) + x.m.shape)
    zeros = np.zeros_like(planes)
    if x.owner == ROLE_A:
        return BShare(x.owner, planes), BShare(x.owner, zeros)
    return BShare(x.owner, zeros), BShare(x.owner, planes)


def _carry_chain(channel: Channel, a: BShare, b: BShare, stages: int,
                 triples) -> tuple[list[BShare], BShare]:
    """Run `stages` ripple stages; returns carries [c_1..c_stages] (c_0 = 0)."""
    shape = a.bits.shape[1:]
    c = BShare(a.owner, np.zeros(shape, dtype=np.uint8))
    carries = []
    for i in range(stages):
        ai = BShare(a.owner, a.bits[i])
        bi = BShare(b.owner, b.bits[i])
        # c' = (a^c)(b^c) ^ c  == majority(a, b, c): one AND per stage
        t = triples.take_bits(int(np.prod(shape)))
        prod = band(channel, ai ^ c, bi ^ c, _reshape_triple(t, shape))
        c = prod ^ c
        carries.append(c)
    return carries, c


def _reshape_triple(t: BitTriple, shape) -> BitTriple:
    return BitTriple(BShare(t.u.owner, t.u.bits.reshape(shape)),
                     BShare(t.v.owner, t.v.bits.reshape(shape)),
                     BShare(t.w.owner, t.w.bits.reshape(shape)))


def a2b(channel: Channel, x: AShare, triples) -> BShare:
    """Full bit decomposition of a shared value.

    Output shape (l, rows, cols): plane j holds XOR shares of bit j, so the
    reconstructed planes satisfy x = sum_j bit_j * 2^j mod 2^l.
    """
    l = x.bits
    a, b = _share_word_bits(x)
    carries, _ = _carry_chain(channel, a, b, l - 1, triples)
    out = a.bits ^ b.bits
    for i, c in enumerate(carries):
        out[i + 1] ^= c.bits
    return BShare(x.owner, out)


def msb(channel: Channel, x: AShare, triples) -> BShare:
    """Sign bit (bit l-1) only: just the carry chain into the top bit."""
    l = x.bits
    a, b = _share_word_bits(x)
    _, c_top = _carry_chain(channel, a, b, l - 1, triples)
    top = a.bits[l - 1] ^ b.bits[l - 1] ^ c_top.bits
    return BShare(x.owner, top)


def b2a(channel: Channel, b: BShare, triples, bits: int = 64) -> AShare:
    """Arithmetic share of a shared bit: b_A + b_B - 2*b_A*b_B over Z_2^l.

    Consumes one elementwise (1x1-per-entry) arithmetic triple batch.
    """
    if b.bits.ndim != 2:
        raise ShapeMismatchError("b2a expects a 2-D bit array")
    mine = RingMatrix(b.bits.astype(np.uint64), bits)
    zero = RingMatrix.zeros(*b.bits.shape, bits)
    if b.owner == ROLE_A:
        p, q = AShare(b.owner, mine), AShare(b.owner, zero)
    else:
        p, q = AShare(b.owner, zero), AShare(b.owner, mine)
    t = triples.take_elementwise(b.bits.shape)
    prod = beaver_mul(channel, p, q, t)
    return p + q - prod.scale_by(2)


def cmp(channel: Channel, x: AShare, y: AShare, triples) -> AShare:
    """Arithmetic share of the strict-less-than bit [x < y].

    Valid only while the plaintext difference satisfies |x - y| < 2^(l-1);
    outside that range the sign of x - y wraps and the result is undefined.
    """
    x._check(y)
    sign = msb(channel, x - y, triples)
    return b2a(channel, sign, triples, x.bits)


def mux(channel: Channel, z: AShare, x: AShare, y: AShare, triples) -> AShare:
    """Select x where the shared bit z is 1, else y: y + z * (x - y)."""
    x._check(y)
    if z.shape != x.shape:
        raise ShapeMismatchError("selector shape mismatch")
    t = triples.take_elementwise(x.shape)
    return y + beaver_mul(channel, z, x - y, t)

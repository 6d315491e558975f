"""Data-independent offline phase: triple budgets, generation, storage.

The budget is derived by statically counting every secure multiplication a
run will perform; generation never sees input data (only shape parameters),
so stores for two different datasets of identical shape and seed are
byte-identical.  Stores are consumed strictly sequentially; a shortfall is
fatal and names the step, surplus at the end of a run only warns.

Two generation modes produce interchangeable stores: a trusted dealer
(local, reproducible from a seed) and a dealerless two-party mode where the
cross terms of each triple are computed with the encrypted sparse product
and converted back to shares.
"""

from __future__ import annotations

import hashlib
import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from gmpy2 import mpz, powmod

from . import ahe
from .ring import RingMatrix, RingSampler, SparsePlainMatrix
from .sharing import AShare, MatrixTriple
from .boolean import BitTriple, BShare
from .transport import (MSG_CIPHERTEXT, PHASE_OFFLINE, ROLE_A, ROLE_B,
                        STEP_OTHER, STEP_S1, STEP_S2, STEP_S3, Channel)

MAGIC = b"MKTS"
VERSION = 1
_STEP_NAMES = {STEP_OTHER: "other", STEP_S1: "S1", STEP_S2: "S2", STEP_S3: "S3"}


class TripleShortfallError(RuntimeError):
    """The budget undercounted; consuming past the end of a pool."""


class StoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class JobSpec:
    """Shape parameters of one clustering job (no data values)."""

    n: int
    d: int
    k: int
    n_a: int
    n_b: int
    d_a: int
    d_b: int
    mode: str            # "vertical" | "horizontal"
    sparse: bool
    bits: int
    frac: int
    iters: int
    theta: int           # reciprocal Newton iterations

    def __post_init__(self):
        if self.mode == "vertical":
            assert self.n == self.n_a == self.n_b and self.d == self.d_a + self.d_b
        elif self.mode == "horizontal":
            assert self.n == self.n_a + self.n_b and self.d == self.d_a == self.d_b
        else:
            raise ValueError("mode must be vertical or horizontal")
        if self.k < 2:
            raise ValueError("k >= 2 required")


def tree_plan(k: int) -> list:
    """Levels of the pairwise argmin reduction tree.

    Each level lists ("cmpm", (wl, pl), (wr, pr)) or ("pass", (w, p)) where
    w is the position width carried by a node and p marks a position that is
    still the public leaf constant.  Secure comparisons total exactly k-1.
    """
    nodes = [(1, True)] * k
    plan = []
    while len(nodes) > 1:
        ops, nxt = [], []
        i = 0
        while i + 1 < len(nodes):
            left, right = nodes[i], nodes[i + 1]
            ops.append(("cmpm", left, right))
            nxt.append((left[0] + right[0], False))
            i += 2
        if i < len(nodes):
            ops.append(("pass", nodes[i]))
            nxt.append(nodes[i])
        plan.append(ops)
        nodes = nxt
    return plan


@dataclass
class TripleBudget:
    """Exact triple demand of a job, itemized by step."""

    bits: int
    matmul_shapes: list = field(default_factory=list)   # (step, m, p, q) in order
    elementwise: dict = field(default_factory=dict)     # step -> element count
    bit_triples: dict = field(default_factory=dict)     # step -> bit count

    def _bump(self, table: dict, step: int, count: int):
        table[step] = table.get(step, 0) + count

    def matmul_count(self) -> int:
        return len(self.matmul_shapes)

    def store_bytes_by_step(self) -> dict:
        """Serialized size of one party's records, per step."""
        wb = self.bits // 8
        out: dict = {}
        for step, m, p, q in self.matmul_shapes:
            out[step] = out.get(step, 0) + 16 + (m * p + p * q + m * q) * wb
        for step, cnt in self.elementwise.items():
            out[step] = out.get(step, 0) + 10 + 3 * cnt * wb
        for step, cnt in self.bit_triples.items():
            out[step] = out.get(step, 0) + 10 + 3 * ((cnt + 7) // 8)
        return out


def compute_budget(job: JobSpec) -> TripleBudget:
    """Count the multiplications of one full run, step by step."""
    b = TripleBudget(bits=job.bits)
    l = job.bits
    plan = tree_plan(job.k)
    for _ in range(job.iters):
        # S1: centroid-norm squares, then the two joint cross products
        b._bump(b.elementwise, STEP_S1, job.k * job.d)
        if not job.sparse:
            if job.mode == "vertical":
                b.matmul_shapes.append((STEP_S1, job.n, job.d_a, job.k))
                b.matmul_shapes.append((STEP_S1, job.n, job.d_b, job.k))
            else:
                b.matmul_shapes.append((STEP_S1, job.n_a, job.d, job.k))
                b.matmul_shapes.append((STEP_S1, job.n_b, job.d, job.k))
        # S2: one comparison per tree node, batched across all n rows
        for level in plan:
            pairs = sum(1 for op in level if op[0] == "cmpm")
            if not pairs:
                continue
            b._bump(b.bit_triples, STEP_S2, job.n * pairs * (l - 1))
            b._bump(b.elementwise, STEP_S2, job.n * pairs)      # b2a
            b._bump(b.elementwise, STEP_S2, job.n * pairs)      # value select
            pos_w = sum((op[1][0] if not op[1][1] else 0)
                        + (op[2][0] if not op[2][1] else 0)
                        for op in level if op[0] == "cmpm")
            if pos_w:
                b._bump(b.elementwise, STEP_S2, job.n * pos_w)  # position scale
        # S3: joint numerator blocks, reciprocal, final product, stop check
        if not job.sparse:
            if job.mode == "vertical":
                b.matmul_shapes.append((STEP_S3, job.k, job.n, job.d_a))
                b.matmul_shapes.append((STEP_S3, job.k, job.n, job.d_b))
            else:
                b.matmul_shapes.append((STEP_S3, job.k, job.n_a, job.d))
                b.matmul_shapes.append((STEP_S3, job.k, job.n_b, job.d))
        b._bump(b.elementwise, STEP_S3, 2 * job.theta * job.k)  # Newton steps
        b._bump(b.elementwise, STEP_S3, job.k * job.d)          # centroid scale
        b._bump(b.elementwise, STEP_S3, job.k * job.d)          # stop-check squares
        b._bump(b.bit_triples, STEP_S3, l - 1)                  # stop-check sign
    return b


# ---------------------------------------------------------------------------
# store data and consumption

@dataclass
class _MatmulRecord:
    step: int
    m: int
    p: int
    q: int
    u: RingMatrix
    v: RingMatrix
    z: RingMatrix


@dataclass
class StoreData:
    role: str
    bits: int
    session: bytes                      # 16-byte dealer session id
    matmul: list = field(default_factory=list)
    elem: dict = field(default_factory=dict)   # step -> (u, v, z) word arrays
    bitpool: dict = field(default_factory=dict)  # step -> (u, v, w) uint8 arrays


class TripleStore:
    """Sequential consumer over one party's correlated randomness.

    The protocol announces its current step with set_step(); every take_*
    draws from that step's pool, asserts shape agreement, and never re-issues
    a record (cursors are monotone).
    """

    def __init__(self, data: StoreData):
        self.data = data
        self.role = data.role
        self.bits = data.bits
        self.session = data.session
        self._step = STEP_OTHER
        self._mm_idx = 0
        self._elem_pos = {s: 0 for s in data.elem}
        self._bit_pos = {s: 0 for s in data.bitpool}
        self.consumed_bytes = {}

    def set_step(self, step: int):
        self._step = step

    def _count(self, nbytes: int):
        self.consumed_bytes[self._step] = self.consumed_bytes.get(self._step, 0) + nbytes

    def take_matmul(self, m: int, p: int, q: int) -> MatrixTriple:
        if self._mm_idx >= len(self.data.matmul):
            raise TripleShortfallError(
                f"matmul triples exhausted during step {_STEP_NAMES[self._step]}")
        rec = self.data.matmul[self._mm_idx]
        if (rec.step, rec.m, rec.p, rec.q) != (self._step, m, p, q):
            raise TripleShortfallError(
                f"matmul triple stream desync: have step {_STEP_NAMES[rec.step]} "
                f"shape ({rec.m},{rec.p},{rec.q}), "
                f"need step {_STEP_NAMES[self._step]} shape ({m},{p},{q})")
        self._mm_idx += 1
        self._count(16 + (m * p + p * q + m * q) * (self.bits // 8))
        r = self.role
        return MatrixTriple(AShare(r, rec.u), AShare(r, rec.v), AShare(r, rec.z))

    def take_elementwise(self, shape) -> MatrixTriple:
        rows, cols = shape
        cnt = rows * cols
        pool = self.data.elem.get(self._step)
        pos = self._elem_pos.get(self._step, 0)
        if pool is None or pos + cnt > pool[0].size:
            raise TripleShortfallError(
                f"elementwise triples exhausted during step {_STEP_NAMES[self._step]}")
        u, v, z = (RingMatrix(arr[pos:pos + cnt].reshape(rows, cols), self.bits)
                   for arr in pool)
        self._elem_pos[self._step] = pos + cnt
        self._count(3 * cnt * (self.bits // 8))
        r = self.role
        return MatrixTriple(AShare(r, u), AShare(r, v), AShare(r, z),
                            elementwise=True)

    def take_bits(self, n: int) -> BitTriple:
        pool = self.data.bitpool.get(self._step)
        pos = self._bit_pos.get(self._step, 0)
        if pool is None or pos + n > pool[0].size:
            raise TripleShortfallError(
                f"bit triples exhausted during step {_STEP_NAMES[self._step]}")
        u, v, w = (BShare(self.role, arr[pos:pos + n]) for arr in pool)
        self._bit_pos[self._step] = pos + n
        self._count(3 * ((n + 7) // 8))
        return BitTriple(u, v, w)

    def remaining(self) -> dict:
        mm = len(self.data.matmul) - self._mm_idx
        elem = {s: p[0].size - self._elem_pos.get(s, 0)
                for s, p in self.data.elem.items()}
        bits = {s: p[0].size - self._bit_pos.get(s, 0)
                for s, p in self.data.bitpool.items()}
        return {"matmul": mm, "elementwise": elem, "bits": bits}

    def warn_if_surplus(self):
        rem = self.remaining()
        leftover = rem["matmul"] + sum(rem["elementwise"].values()) \
            + sum(rem["bits"].values())
        if leftover:
            warnings.warn(f"triple store surplus after run: {rem}")
        return leftover


def session_id_from_seed(seed: bytes) -> bytes:
    return hashlib.sha256(b"dealer-session" + seed).digest()[:16]


def dealer_generate(budget: TripleBudget, seed: bytes) -> tuple[TripleStore, TripleStore]:
    """Trusted-dealer mode: reproducible pools for both parties from a seed."""
    rng = RingSampler(seed)
    session = session_id_from_seed(seed)
    l = budget.bits
    a = StoreData(ROLE_A, l, session)
    b = StoreData(ROLE_B, l, session)
    for step, m, p, q in budget.matmul_shapes:
        u = rng.uniform(m, p, l)
        v = rng.uniform(p, q, l)
        z = u @ v
        ua = rng.uniform(m, p, l)
        va = rng.uniform(p, q, l)
        za = rng.uniform(m, q, l)
        a.matmul.append(_MatmulRecord(step, m, p, q, ua, va, za))
        b.matmul.append(_MatmulRecord(step, m, p, q, u - ua, v - va, z - za))
    for step, cnt in budget.elementwise.items():
        u = rng.words(cnt, l)
        v = rng.words(cnt, l)
        z = u * v & np.uint64((1 << l) - 1)
        ua, va, za = rng.words(cnt, l), rng.words(cnt, l), rng.words(cnt, l)
        a.elem[step] = (ua, va, za)
        b.elem[step] = ((u - ua) & np.uint64((1 << l) - 1),
                        (v - va) & np.uint64((1 << l) - 1),
                        (z - za) & np.uint64((1 << l) - 1))
    for step, cnt in budget.bit_triples.items():
        u = rng.bit_array(cnt)
        v = rng.bit_array(cnt)
        w = u & v
        ua, va, wa = rng.bit_array(cnt), rng.bit_array(cnt), rng.bit_array(cnt)
        a.bitpool[step] = (ua, va, wa)
        b.bitpool[step] = (u ^ ua, v ^ va, w ^ wa)
    return TripleStore(a), TripleStore(b)


# ---------------------------------------------------------------------------
# file format

def write_store(store: TripleStore, path: str):
    d = store.data
    buf = io.BytesIO()
    nrec = len(d.matmul) + len(d.elem) + len(d.bitpool)
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, d.bits, 0 if d.role == ROLE_A else 1))
    buf.write(d.session)
    buf.write(struct.pack("<Q", nrec))
    wb = d.bits // 8
    dt = np.dtype(f"<u{wb}")
    for rec in d.matmul:
        buf.write(struct.pack("<BBIII", 1, rec.step, rec.m, rec.p, rec.q))
        for mat in (rec.u, rec.v, rec.z):
            buf.write(mat.words.astype(dt).tobytes())
    for step, (u, v, z) in d.elem.items():
        buf.write(struct.pack("<BBQ", 2, step, u.size))
        for arr in (u, v, z):
            buf.write(arr.astype(dt).tobytes())
    for step, (u, v, w) in d.bitpool.items():
        buf.write(struct.pack("<BBQ", 3, step, u.size))
        for arr in (u, v, w):
            buf.write(np.packbits(arr, bitorder="little").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_store(path: str) -> TripleStore:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise StoreFormatError("bad magic")
    version, bits, role_byte = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise StoreFormatError(f"unsupported version {version}")
    session = raw[8:24]
    (nrec,) = struct.unpack_from("<Q", raw, 24)
    off = 32
    data = StoreData(ROLE_A if role_byte == 0 else ROLE_B, bits, session)
    wb = bits // 8
    dt = np.dtype(f"<u{wb}")
    for _ in range(nrec):
        kind, step = struct.unpack_from("<BB", raw, off)
        off += 2
        if kind == 1:
            m, p, q = struct.unpack_from("<III", raw, off)
            off += 12
            mats = []
            for cnt in (m * p, p * q, m * q):
                arr = np.frombuffer(raw, dtype=dt, count=cnt, offset=off)
                off += cnt * wb
                mats.append(arr.astype(np.uint64))
            data.matmul.append(_MatmulRecord(
                step, m, p, q,
                RingMatrix(mats[0].reshape(m, p), bits),
                RingMatrix(mats[1].reshape(p, q), bits),
                RingMatrix(mats[2].reshape(m, q), bits)))
        elif kind == 2:
            (cnt,) = struct.unpack_from("<Q", raw, off)
            off += 8
            arrs = []
            for _ in range(3):
                arr = np.frombuffer(raw, dtype=dt, count=cnt, offset=off)
                off += cnt * wb
                arrs.append(arr.astype(np.uint64))
            data.elem[step] = tuple(arrs)
        elif kind == 3:
            (cnt,) = struct.unpack_from("<Q", raw, off)
            off += 8
            nb = (cnt + 7) // 8
            arrs = []
            for _ in range(3):
                packed = np.frombuffer(raw, dtype=np.uint8, count=nb, offset=off)
                off += nb
                arrs.append(np.unpackbits(packed, bitorder="little")[:cnt])
            data.bitpool[step] = tuple(arrs)
        else:
            raise StoreFormatError(f"unknown record kind {kind}")
    return TripleStore(data)


# ---------------------------------------------------------------------------
# dealerless mode: HE-based two-party generation

def he_generate(channel: Channel, role: str, budget: TripleBudget,
                keypair: ahe.PaillierKeyPair, peer_pub: ahe.PaillierPublicKey,
                sampler: RingSampler, session: bytes) -> TripleStore:
    """Generate this party's pools jointly with the peer, no dealer.

    Each product's cross terms are computed under HE (two ciphertext batches
    per triple) and converted back to shares; the resulting records satisfy
    the same invariants as dealer output and the stores are interchangeable.
    """
    l = budget.bits
    data = StoreData(role, l, session)
    for step, m, p, q in budget.matmul_shapes:
        channel.set_context(PHASE_OFFLINE, step)
        u = sampler.uniform(m, p, l)
        v = sampler.uniform(p, q, l)
        cross = _cross_matmul(channel, role, u, v, keypair, peer_pub, sampler, l)
        z = (u @ v) + cross
        data.matmul.append(_MatmulRecord(step, m, p, q, u, v, z))
    for step, cnt in sorted(budget.elementwise.items()):
        channel.set_context(PHASE_OFFLINE, step)
        u = sampler.words(cnt, l)
        v = sampler.words(cnt, l)
        cross = _cross_elementwise(channel, role, u, v, keypair, peer_pub,
                                   sampler, l, out_mod=1 << l)
        mask = np.uint64((1 << l) - 1)
        data.elem[step] = (u, v, (u * v + cross) & mask)
    for step, cnt in sorted(budget.bit_triples.items()):
        channel.set_context(PHASE_OFFLINE, step)
        u = sampler.bit_array(cnt)
        v = sampler.bit_array(cnt)
        cross = _cross_elementwise(channel, role, u.astype(np.uint64),
                                   v.astype(np.uint64), keypair, peer_pub,
                                   sampler, l, out_mod=2)
        data.bitpool[step] = (u, v, (u & v) ^ cross.astype(np.uint8))
    return TripleStore(data)


def _cross_matmul(channel, role, u, v, keypair, peer_pub, sampler, l) -> RingMatrix:
    """Shares of U_A @ V_B + U_B @ V_A from each party's local halves."""
    m, q = u.rows, v.cols
    if role == ROLE_A:
        s1 = ahe.sparse_matmul_holder(channel, role,
                                      SparsePlainMatrix.from_dense(u),
                                      peer_pub, q, sampler, centered=False)
        s2 = ahe.sparse_matmul_owner(channel, role, v, keypair, m, sampler)
    else:
        s1 = ahe.sparse_matmul_owner(channel, role, v, keypair, m, sampler)
        s2 = ahe.sparse_matmul_holder(channel, role,
                                      SparsePlainMatrix.from_dense(u),
                                      peer_pub, q, sampler, centered=False)
    return (s1 + s2).m


def _cross_elementwise(channel, role, u: np.ndarray, v: np.ndarray,
                       keypair, peer_pub, sampler, l, out_mod: int) -> np.ndarray:
    """Word shares of u_A*v_B + u_B*v_A (mod out_mod), flat arrays."""
    cnt = u.size
    if role == ROLE_A:
        s1 = _elem_holder(channel, u, peer_pub, sampler, l, out_mod)
        s2 = _elem_owner(channel, v, keypair, sampler, cnt, out_mod)
    else:
        s1 = _elem_owner(channel, v, keypair, sampler, cnt, out_mod)
        s2 = _elem_holder(channel, u, peer_pub, sampler, l, out_mod)
    if out_mod == 2:
        return (s1 ^ s2) & np.uint64(1)
    return (s1 + s2) % np.uint64(out_mod) if out_mod < (1 << 64) \
        else s1 + s2


def _elem_owner(channel, vals: np.ndarray, keypair, sampler, cnt: int,
                out_mod: int) -> np.ndarray:
    cm = ahe.enc_matrix(keypair, RingMatrix(vals.reshape(1, -1), 64), sampler)
    channel.send(ahe.serialize_ciphers(cm.cts, keypair.pub), MSG_CIPHERTEXT)
    return ahe.he2ss_own_words(channel, keypair, cnt, out_mod)


def _elem_holder(channel, exps: np.ndarray, peer_pub, sampler, l,
                 out_mod: int) -> np.ndarray:
    f = channel.recv()
    cts = ahe.deserialize_ciphers(f.payload, exps.size)
    z = [int(powmod(mpz(c), int(e), peer_pub.n2))
         for c, e in zip(cts, exps)]
    z_bound = int(exps.max(initial=0)) * ((1 << 64) - 1) + 1
    return ahe.he2ss_hold_words(channel, z, peer_pub, z_bound, sampler, out_mod)

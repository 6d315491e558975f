"""Additively homomorphic encryption (Paillier) and the HE<->SS bridge.

Ciphertexts live under one party's public key; homomorphic identities:
Dec(c1 + c2) = m1 + m2 mod n, Dec(u * c) = u * m mod n.  Decryption uses
CRT over p^2/q^2, and a key owner encrypting under its own key uses the
same CRT split for the obfuscation exponentiation.

he2ss converts a ciphertext matrix held by one party (the "holder") under
the other party's key (the "owner") into additive shares over Z_2^l: the
holder adds a statistical mask r = 2^zb + uniform[0, 2^(zb+sigma)) chosen
so Z + r never wraps mod n even for negative centered Z, keeps -r mod 2^l,
and the owner decrypts and reduces mod 2^l.  Configurations where the
plaintext space cannot absorb the mask are rejected at setup.

The secure sparse matrix product sends |Y| ciphertexts one way and |Z|
masked ciphertexts back; the holder touches only stored nonzeros and uses
fixed-base windowed exponentiation for columns with enough reuse.
"""

from __future__ import annotations

import os
import secrets
import struct
from dataclasses import dataclass, field

import gmpy2
import numpy as np
from gmpy2 import invert, mpz, powmod

from .ring import RingMatrix, RingSampler, SparsePlainMatrix, _mask_of
from .sharing import AShare
from .transport import (MSG_CIPHERTEXT, MSG_PUBLIC_KEY, Channel)

SIGMA_STAT = 40          # statistical masking parameter
_WINDOW = 6              # fixed-base window width (bits)
_TABLE_MIN_USES = 16     # column reuse needed before tables pay off
_PAR_MIN_ITEMS = 2048    # below this, skip the worker pool


class KeyMismatchError(ValueError):
    """Ciphertexts under different keys were combined."""


class MaskOverflowError(ValueError):
    """Plaintext space too small for the value bound plus mask."""


@dataclass(eq=False)
class PaillierPublicKey:
    n: int
    bits: int = 0

    def __post_init__(self):
        self.n = mpz(self.n)
        if not self.bits:
            self.bits = int(self.n).bit_length()
        self.n2 = self.n * self.n
        self.fingerprint = _fingerprint(int(self.n))

    def raw_encrypt(self, m: int, r: int) -> int:
        # g = n + 1, so g^m = 1 + m*n mod n^2
        return (1 + (mpz(m) % self.n) * self.n) * powmod(mpz(r), self.n, self.n2) % self.n2


@dataclass(eq=False)
class PaillierKeyPair:
    pub: PaillierPublicKey
    p: int
    q: int

    def __post_init__(self):
        self.p, self.q = mpz(self.p), mpz(self.q)
        self.p2 = self.p * self.p
        self.q2 = self.q * self.q
        # L_p((1+n)^(p-1) mod p^2) = (p-1)*q mod p, closed form
        self.hp = invert((self.p - 1) * self.q % self.p, self.p)
        self.hq = invert((self.q - 1) * self.p % self.q, self.q)
        self.p_inv_q = invert(self.p, self.q)
        # exponent reductions for own-key encryption (group orders)
        self.ep = self.pub.n % (self.p * (self.p - 1))
        self.eq = self.pub.n % (self.q * (self.q - 1))
        self.q2_inv_p2 = invert(self.q2, self.p2)

    def decrypt(self, c: int) -> int:
        c = mpz(c)
        n = self.pub.n
        mp = (powmod(c, self.p - 1, self.p2) - 1) // self.p * self.hp % self.p
        mq = (powmod(c, self.q - 1, self.q2) - 1) // self.q * self.hq % self.q
        return int((mp + self.p * ((mq - mp) * self.p_inv_q % self.q)) % n)

    def _noise_crt(self, r: int) -> mpz:
        """r^n mod n^2 computed over p^2 and q^2 separately."""
        r = mpz(r)
        xp = powmod(r % self.p2, self.ep, self.p2)
        xq = powmod(r % self.q2, self.eq, self.q2)
        return (xq + self.q2 * ((xp - xq) * self.q2_inv_p2 % self.p2)) % self.pub.n2

    def raw_encrypt(self, m: int, r: int) -> int:
        pub = self.pub
        return (1 + (mpz(m) % pub.n) * pub.n) * self._noise_crt(r) % pub.n2


def _fingerprint(n: int) -> str:
    import hashlib
    return hashlib.sha256(int(n).to_bytes((n.bit_length() + 7) // 8, "big")).hexdigest()[:16]


def _random_prime(bits: int, rng: RingSampler | None) -> mpz:
    while True:
        if rng is None:
            cand = secrets.randbits(bits)
        else:
            cand = int.from_bytes(rng.randbytes((bits + 7) // 8), "big")
        cand |= (1 << (bits - 1)) | 1
        p = gmpy2.next_prime(mpz(cand))
        if int(p).bit_length() == bits:
            return p


def keygen(bits: int = 2048, rng: RingSampler | None = None,
           allow_short: bool = False) -> PaillierKeyPair:
    """Generate a Paillier key pair with an exactly bits-long modulus.

    Keys shorter than 2048 bits are for tests only and must be requested
    explicitly with allow_short.
    """
    if bits < 2048 and not allow_short:
        raise ValueError("keys shorter than 2048 bits need allow_short=True")
    if bits < 128:
        raise ValueError("key too short even for tests")
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p == q:
            continue
        n = p * q
        if int(n).bit_length() == bits:
            return PaillierKeyPair(PaillierPublicKey(n, bits), p, q)


def _rand_obfuscator(pub: PaillierPublicKey, rng: RingSampler | None) -> int:
    if rng is None:
        return secrets.randbelow(int(pub.n) - 1) + 1
    return rng.below(int(pub.n) - 1) + 1


# -- scalar homomorphic operations -----------------------------------------

def he_add(pub: PaillierPublicKey, c1: int, c2: int) -> int:
    """Dec(he_add(c1,c2)) = m1 + m2 mod n."""
    return int(mpz(c1) * mpz(c2) % pub.n2)


def he_plain_add(pub: PaillierPublicKey, c: int, u: int) -> int:
    """Dec = m + u mod n; cheap because g = n+1."""
    return int(mpz(c) * (1 + (mpz(u) % pub.n) * pub.n) % pub.n2)


def he_scalar_mul(pub: PaillierPublicKey, c: int, u: int) -> int:
    """Dec = u * m mod n; negative u goes through the ciphertext inverse."""
    return int(powmod(mpz(c), mpz(u), pub.n2))


# -- ciphertext matrices -----------------------------------------------------

@dataclass(eq=False)
class CipherMatrix:
    rows: int
    cols: int
    cts: list
    key_fingerprint: str

    def __post_init__(self):
        if len(self.cts) != self.rows * self.cols:
            raise ValueError("ciphertext count does not match shape")

    def check_key(self, pub: PaillierPublicKey):
        if self.key_fingerprint != pub.fingerprint:
            raise KeyMismatchError("ciphertext matrix under a different key")


def enc_matrix(key, m: RingMatrix, rng: RingSampler | None = None) -> CipherMatrix:
    """Encrypt raw ring words entrywise (key may be a pair or a public key)."""
    pub = key.pub if isinstance(key, PaillierKeyPair) else key
    flat = [int(v) for v in m.words.reshape(-1)]
    rs = [_rand_obfuscator(pub, rng) for _ in flat]
    items = list(zip(flat, rs))
    cts = _maybe_parallel(_enc_chunk, items, {"key": key})
    return CipherMatrix(m.rows, m.cols, cts, pub.fingerprint)


def dec_matrix(keypair: PaillierKeyPair, c: CipherMatrix) -> list[int]:
    c.check_key(keypair.pub)
    return _maybe_parallel(_dec_chunk, [int(x) for x in c.cts], {"key": keypair})


def cipher_len(pub: PaillierPublicKey) -> int:
    """Fixed serialized size of one ciphertext under this key."""
    return (2 * pub.bits + 7) // 8


def serialize_ciphers(cts, pub: PaillierPublicKey | None = None) -> bytes:
    """Big-endian ints with 4-byte length prefixes; fixed-width when the key
    is given, so message sizes depend only on ciphertext count."""
    out = []
    pad = cipher_len(pub) if pub is not None else None
    for c in cts:
        n = int(c)
        b = n.to_bytes(pad if pad else (n.bit_length() + 7) // 8 or 1, "big")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    return b"".join(out)


def count_ciphers(data: bytes) -> int:
    off = 0
    n = 0
    while off < len(data):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4 + ln
        n += 1
    return n


def deserialize_ciphers(data: bytes, count: int) -> list[int]:
    cts = []
    off = 0
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        cts.append(int.from_bytes(data[off:off + ln], "big"))
        off += ln
    return cts


def send_public_key(channel: Channel, pub: PaillierPublicKey):
    b = int(pub.n).to_bytes((pub.bits + 7) // 8, "big")
    channel.send(struct.pack("<I", len(b)) + b, MSG_PUBLIC_KEY)


def recv_public_key(channel: Channel) -> PaillierPublicKey:
    f = channel.recv()
    (ln,) = struct.unpack_from("<I", f.payload, 0)
    return PaillierPublicKey(int.from_bytes(f.payload[4:4 + ln], "big"))


# -- fork-based worker pool ---------------------------------------------------
#
# gmpy2 holds the GIL, so bulk encrypt/decrypt/exponentiation only scales
# through processes.  State rides to the children through fork (copy-on-
# write); only small int lists are pickled back.  Forks are serialized so a
# selftest's two party threads never fork concurrently (fork from a threaded
# process must not race the peer thread's allocator).

import threading as _threading

_FORK_STATE: dict = {}
_FORK_LOCK = _threading.Lock()


def _enc_chunk(state, items):
    key = state["key"]
    return [int(key.raw_encrypt(m, r)) for m, r in items]


def _dec_chunk(state, items):
    key = state["key"]
    return [key.decrypt(c) for c in items]


def _pool_worker(args):
    fn, chunk = args
    return fn(_FORK_STATE, chunk)


def parallel_workers() -> int:
    return max(1, os.cpu_count() or 1)


def _maybe_parallel(chunk_fn, items: list, state: dict) -> list:
    workers = parallel_workers()
    if workers <= 1 or len(items) < _PAR_MIN_ITEMS:
        return chunk_fn(state, items)
    import multiprocessing as mp
    global _FORK_STATE
    with _FORK_LOCK:
        _FORK_STATE = state
        try:
            chunks = [items[i::workers] for i in range(workers)]
            ctx = mp.get_context("fork")
            with ctx.Pool(workers) as pool:
                results = pool.map(_pool_worker, [(chunk_fn, ch) for ch in chunks])
            out = [None] * len(items)
            for w, res in enumerate(results):
                out[w::workers] = res
            return out
        finally:
            _FORK_STATE = {}


# -- HE -> SS conversion ------------------------------------------------------

def mask_bits_needed(z_bound: int) -> int:
    zb = max(int(z_bound).bit_length(), 1)
    return zb + SIGMA_STAT + 2


def check_mask_capacity(pub: PaillierPublicKey, z_bound: int):
    """Reject configurations whose plaintext space cannot absorb Z + mask."""
    if int(pub.n).bit_length() <= mask_bits_needed(z_bound):
        raise MaskOverflowError(
            f"plaintext space {int(pub.n).bit_length()} bits cannot absorb "
            f"value bound plus {SIGMA_STAT}-bit mask ({mask_bits_needed(z_bound)} bits)")


def he2ss_hold_words(channel: Channel, cts: list, pub: PaillierPublicKey,
                      z_bound: int, sampler: RingSampler,
                      out_mod: int) -> np.ndarray:
    """Holder side: mask, send, keep -r mod out_mod (as uint64 words)."""
    check_mask_capacity(pub, z_bound)
    zb = max(int(z_bound).bit_length(), 1)
    window = 1 << (zb + SIGMA_STAT)
    offset = 1 << zb
    out = np.empty(len(cts), dtype=np.uint64)
    masked = []
    n, n2 = pub.n, pub.n2
    for i, c in enumerate(cts):
        r = offset + sampler.below(window)
        masked.append(int(mpz(c) * (1 + mpz(r) % n * n) % n2))
        out[i] = (-r) % out_mod
    channel.send(serialize_ciphers(masked, pub), MSG_CIPHERTEXT)
    return out


def he2ss_own_words(channel: Channel, keypair: PaillierKeyPair, count: int,
                     out_mod: int) -> np.ndarray:
    """Owner side: decrypt the masked batch and reduce mod out_mod."""
    f = channel.recv()
    cts = deserialize_ciphers(f.payload, count)
    ms = _maybe_parallel(_dec_chunk, cts, {"key": keypair})
    out = np.empty(count, dtype=np.uint64)
    for i, m in enumerate(ms):
        out[i] = m % out_mod
    return out


def he2ss_hold(channel: Channel, role: str, c: CipherMatrix,
               pub: PaillierPublicKey, z_bound: int, sampler: RingSampler,
               bits: int = 64) -> AShare:
    """Convert held ciphertexts (peer's key) into this party's A-share."""
    c.check_key(pub)
    words = he2ss_hold_words(channel, c.cts, pub, z_bound, sampler, 1 << bits)
    return AShare(role, RingMatrix(words.reshape(c.rows, c.cols), bits))


def he2ss_own(channel: Channel, role: str, keypair: PaillierKeyPair,
              rows: int, cols: int, bits: int = 64) -> AShare:
    """Key owner's side of he2ss: receives, decrypts, reduces mod 2^l."""
    words = he2ss_own_words(channel, keypair, rows * cols, 1 << bits)
    return AShare(role, RingMatrix(words.reshape(rows, cols), bits))


# -- fixed-base windowed ciphertext matmul -----------------------------------

def _centered_exponents(values: np.ndarray, bits: int) -> np.ndarray:
    half = 1 << (bits - 1)
    mod = 1 << bits
    return np.array([int(v) - mod if int(v) >= half else int(v)
                     for v in values], dtype=np.object_)


def _cipher_matmul(pub: PaillierPublicKey, x: SparsePlainMatrix,
                   y_cts: list, q: int, centered: bool) -> list:
    """Flat (x.rows * q) ciphertexts of Z = X @ Y, nonzeros only."""
    rows_ids = np.repeat(np.arange(x.rows, dtype=np.int64),
                         np.diff(x.indptr))
    if centered:
        exps = _centered_exponents(x.values, x.bits)
    else:
        exps = np.array([int(v) for v in x.values], dtype=np.object_)
    order = np.lexsort((rows_ids, x.indices))
    col_sorted = x.indices[order]
    row_sorted = rows_ids[order]
    exp_sorted = exps[order]

    acc = [mpz(1)] * (x.rows * q)    # Enc(0) with unit noise
    y_cts = [mpz(c) for c in y_cts]

    start = 0
    nnz = x.nnz
    workers = parallel_workers()
    use_pool = workers > 1 and nnz * q >= _PAR_MIN_ITEMS
    tasks = []
    while start < nnz:
        j = int(col_sorted[start])
        end = int(np.searchsorted(col_sorted, j, side="right"))
        tasks.append((j, start, end))
        start = end

    def run(task_list, acc_out):
        for j, s, e in task_list:
            _accumulate_column(pub, y_cts[j * q:(j + 1) * q],
                               row_sorted[s:e], exp_sorted[s:e], q, acc_out)

    if not use_pool:
        run(tasks, acc)
        return acc

    # split rows between workers; each scans all columns but only its rows
    global _FORK_STATE
    import multiprocessing as mp
    with _FORK_LOCK:
        _FORK_STATE = {"pub": pub, "y": y_cts, "tasks": tasks, "q": q,
                       "rows": row_sorted, "exps": exp_sorted}
        try:
            ctx = mp.get_context("fork")
            bounds = np.linspace(0, x.rows, workers + 1).astype(int)
            spans = [(int(bounds[w]), int(bounds[w + 1])) for w in range(workers)]
            with ctx.Pool(workers) as pool:
                parts = pool.map(_matmul_rows_worker, spans)
            for (lo, hi), part in zip(spans, parts):
                acc[lo * q:hi * q] = [mpz(v) for v in part]
            return acc
        finally:
            _FORK_STATE = {}


def _matmul_rows_worker(bounds):
    lo, hi = bounds
    st = _FORK_STATE
    pub, y_cts, q = st["pub"], st["y"], st["q"]
    rows, exps = st["rows"], st["exps"]
    sel = (rows >= lo) & (rows < hi)
    acc = [mpz(1)] * ((hi - lo) * q)
    for j, s, e in st["tasks"]:
        m = sel[s:e]
        if not m.any():
            continue
        _accumulate_column(pub, y_cts[j * q:(j + 1) * q],
                           rows[s:e][m] - lo, exps[s:e][m], q, acc)
    return [int(v) for v in acc]


def _accumulate_column(pub: PaillierPublicKey, bases: list,
                       row_idx: np.ndarray, col_exps: np.ndarray, q: int,
                       acc: list):
    """acc[i*q+c] *= bases[c]^e for every nonzero (i, e) of one X column."""
    n2 = pub.n2
    cnt = len(col_exps)
    pos = all(int(e) >= 0 for e in col_exps)
    emax = max((abs(int(e)) for e in col_exps), default=0)
    ebits = emax.bit_length()
    if pos and cnt >= _TABLE_MIN_USES and 0 < ebits <= 32:
        nwin = (ebits + _WINDOW - 1) // _WINDOW
        tables = [_window_table(mpz(b), nwin, n2) for b in bases]
        evals = np.array([int(e) for e in col_exps], dtype=np.int64)
        nibs = np.empty((cnt, nwin), dtype=np.int16)
        for w in range(nwin):
            nibs[:, w] = (evals >> (w * _WINDOW)) & ((1 << _WINDOW) - 1)
        for t in range(cnt):
            base_off = int(row_idx[t]) * q
            nb = nibs[t]
            for c in range(q):
                a = acc[base_off + c]
                tab = tables[c]
                for w in range(nwin):
                    v = nb[w]
                    if v:
                        a = a * tab[w][v - 1] % n2
                acc[base_off + c] = a
    else:
        for t in range(cnt):
            e = int(col_exps[t])
            base_off = int(row_idx[t]) * q
            for c in range(q):
                acc[base_off + c] = acc[base_off + c] * powmod(bases[c], e, n2) % n2


def _window_table(base: mpz, nwin: int, n2: mpz) -> list:
    """tables[w][v-1] = base^(v * 2^(W*w)) for v in 1..2^W-1."""
    tables = []
    cur = base
    width = (1 << _WINDOW) - 1
    for w in range(nwin):
        row = [cur]
        a = cur
        for _ in range(width - 1):
            a = a * cur % n2
            row.append(a)
        tables.append(row)
        if w + 1 < nwin:
            cur = row[-1] * cur % n2   # cur^(2^W)
    return tables


# -- secure sparse matrix product (holder has sparse X, owner has dense Y) ---

def sparse_z_bound(x: SparsePlainMatrix, centered: bool) -> int:
    """Cheap bound on |Z|: max |x| entry times max row occupancy times 2^l."""
    if x.nnz == 0:
        return 1
    per_row = int(np.diff(x.indptr).max())
    if centered:
        # |centered(v)| = min(v, 2^l - v); values are nonzero so no wrap
        comp = (np.uint64(0) - x.values) & _mask_of(x.bits)
        max_abs = int(np.minimum(x.values, comp).max())
    else:
        max_abs = int(x.values.max())
    return max_abs * per_row * ((1 << x.bits) - 1)


def sparse_matmul_owner(channel: Channel, role: str, y: RingMatrix,
                        keypair: PaillierKeyPair, out_rows: int,
                        rng: RingSampler | None = None) -> AShare:
    """Dense-side party: encrypt Y, ship it, decrypt the masked product."""
    cm = enc_matrix(keypair, y, rng)
    channel.send(serialize_ciphers(cm.cts, keypair.pub), MSG_CIPHERTEXT)
    return he2ss_own(channel, role, keypair, out_rows, y.cols, y.bits)


def sparse_matmul_holder(channel: Channel, role: str, x: SparsePlainMatrix,
                         peer_pub: PaillierPublicKey, y_cols: int,
                         sampler: RingSampler, centered: bool = True) -> AShare:
    """Sparse-side party: receive encrypted Y, multiply, mask, return share.

    The reconstruction equals X @ Y mod 2^l exactly (integer semantics); no
    X-sized message is ever transmitted.
    """
    z_bound = sparse_z_bound(x, centered)
    check_mask_capacity(peer_pub, z_bound)
    f = channel.recv()
    y_cts = deserialize_ciphers(f.payload, x.cols * y_cols)
    z_cts = _cipher_matmul(peer_pub, x, y_cts, y_cols, centered)
    words = he2ss_hold_words(channel, z_cts, peer_pub, z_bound, sampler,
                              1 << x.bits)
    return AShare(role, RingMatrix(words.reshape(x.rows, y_cols), x.bits))

"""Secure two-party Lloyd iteration over additive shares.

Each iteration runs three steps plus a convergence check:

  S1  reduced distances:  D' = U - 2 X mu^T, where U broadcasts the centroid
      squared norms.  Terms pairing a party's plaintext block with its own
      share are local; the two cross terms cost one Beaver round each in
      dense mode or one encrypted sparse product each in sparse mode.
  S2  assignment: a pairwise reduction tree over each row's k distances.
      Every node compares right-strictly-less-than-left, so equal values
      keep the left (lower-index) operand; positions are carried as
      arithmetic one-hot fragments and concatenated upward.  All n rows are
      batched, so round count depends only on tree depth and ring width.
  S3  centroid update: numerator C^T X from local and cross blocks, a
      phantom member (+ old centroid / + 1) that keeps cluster sizes secret
      and empty clusters stable, then a Newton-Raphson reciprocal of the
      counts with an exact power-of-two prescale.

The only value ever revealed during the online phase is the one-bit stop
flag; Beaver openings are uniform and the HE path transmits ciphertexts or
statistically masked plaintexts.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import ahe
from .boolean import msb, mux, open_bits
from .boolean import cmp as secure_cmp
from .dealer import TripleStore, tree_plan
from .kmeans import KMeansConfig, normalize_minmax, plaintext_kmeans
from .ring import (FixedPointConfig, RingMatrix, RingSampler,
                   SparsePlainMatrix, encode_fixed, encode_matrix,
                   decode_matrix)
from .sharing import (AShare, beaver_matmul, beaver_mul, open_share,
                      public_share, share, truncate)
from .transport import (MSG_CONTROL, MSG_METRICS, PHASE_OFFLINE, PHASE_ONLINE,
                        ROLE_A, ROLE_B, STEP_OTHER, STEP_S1, STEP_S2, STEP_S3,
                        Channel)

NR_INIT_CONST = 2.9142   # affine reciprocal seed w0 = const - 2x on (0, 1]


class ConfigMismatchError(RuntimeError):
    """The two parties disagree on the job configuration or store session."""


@dataclass
class ProtocolSession:
    """Everything one party needs while running the protocol."""

    role: str
    channel: Channel
    cfg: KMeansConfig
    store: TripleStore
    sampler: RingSampler
    x_float: np.ndarray          # this party's block, normalized reals
    x_enc: RingMatrix            # encoded block
    x_csr: SparsePlainMatrix | None = None
    keypair: ahe.PaillierKeyPair | None = None
    peer_pub: ahe.PaillierPublicKey | None = None

    @property
    def fp(self) -> FixedPointConfig:
        return self.cfg.fixed_point

    @property
    def peer(self) -> str:
        return ROLE_B if self.role == ROLE_A else ROLE_A

    def zeros(self, rows: int, cols: int) -> AShare:
        return AShare(self.role, RingMatrix.zeros(rows, cols, self.fp.total_bits))

    def public(self, arr: np.ndarray) -> AShare:
        """Share of a public real-valued matrix (A holds it, B holds zeros)."""
        return public_share(self.role, encode_matrix(arr, self.fp))

    def public_words(self, words: np.ndarray) -> AShare:
        return public_share(self.role,
                            RingMatrix(np.atleast_2d(words), self.fp.total_bits))


@dataclass
class RunResult:
    role: str
    metrics: object
    iters_run: int
    stopped_early: bool
    mu_share: AShare
    c_share: AShare
    store_bytes: dict
    store_surplus: int
    opened_centroids: np.ndarray | None = None
    opened_assignments: np.ndarray | None = None
    trajectory: list | None = None
    peer_metrics: dict | None = None
    step_seconds: dict | None = None


def _hstack(shares: list[AShare]) -> AShare:
    words = np.hstack([s.m.words for s in shares])
    return AShare(shares[0].owner, RingMatrix(words, shares[0].bits))


def _vstack(shares: list[AShare]) -> AShare:
    words = np.vstack([s.m.words for s in shares])
    return AShare(shares[0].owner, RingMatrix(words, shares[0].bits))


def _tile_col(a: AShare, col: int, width: int) -> AShare:
    w = np.tile(a.m.words[:, col:col + 1], (1, width))
    return AShare(a.owner, RingMatrix(w, a.bits))


# ---------------------------------------------------------------------------
# S1: reduced distances

def _centroid_norms(sess: ProtocolSession, mu: AShare) -> AShare:
    """Row-broadcast |mu_j|^2 term at scale 2^2f, recomputed every iteration."""
    k, d = mu.shape
    t = sess.store.take_elementwise((k, d))
    sq = beaver_mul(sess.channel, mu, mu, t)
    norms = sq.m.words.sum(axis=1)                     # (k,) wraps mod 2^l
    u = np.tile(norms[None, :], (sess.cfg.partition.n, 1))
    return AShare(sess.role, RingMatrix(u, sess.fp.total_bits))


def _joint_dense(sess: ProtocolSession, x_holder: str, x_val: RingMatrix | None,
                 y_holder: str, y_val: RingMatrix | None,
                 m: int, p: int, q: int) -> AShare:
    """Beaver product of two single-party plaintexts (degenerate sharings)."""
    t = sess.store.take_matmul(m, p, q)
    xs = AShare(sess.role, x_val) if sess.role == x_holder \
        else sess.zeros(m, p)
    ys = AShare(sess.role, y_val) if sess.role == y_holder \
        else sess.zeros(p, q)
    return beaver_matmul(sess.channel, xs, ys, t)


def _joint_sparse(sess: ProtocolSession, holder: str,
                  x_csr: SparsePlainMatrix | None, y_val: RingMatrix | None,
                  out_rows: int, out_cols: int) -> AShare:
    """Encrypted sparse product; holder has the sparse plaintext operand."""
    if sess.role == holder:
        return ahe.sparse_matmul_holder(sess.channel, sess.role, x_csr,
                                        sess.peer_pub, out_cols, sess.sampler)
    return ahe.sparse_matmul_owner(sess.channel, sess.role, y_val,
                                   sess.keypair, out_rows, sess.sampler)


def reduced_distances(sess: ProtocolSession, mu: AShare) -> AShare:
    """Shares of D' = U - 2 X mu^T (n x k) at scale 2^2f.

    Left untruncated on purpose: the assignment step only compares entries
    of the same row, so the common scale cancels and D' stays the exact
    integer value of Eq-style reduced distances on the encoded inputs
    (|D'| <= 3d * 2^2f, far below the ring and comparison bounds).
    """
    part = sess.cfg.partition
    n, d, k = part.n, part.d, sess.cfg.k
    u = _centroid_norms(sess, mu)

    if part.mode == "vertical":
        lo, hi = (0, part.d_a) if sess.role == ROLE_A else (part.d_a, d)
        local = AShare(sess.role, sess.x_enc @ mu.slice_cols(lo, hi).m.transpose())
        # cross 1: A's block times B's share of the A-columns
        y1 = mu.slice_cols(0, part.d_a).m.transpose() if sess.role == ROLE_B else None
        if sess.cfg.sparse:
            j1 = _joint_sparse(sess, ROLE_A, sess.x_csr, y1, n, k)
        else:
            j1 = _joint_dense(sess, ROLE_A, sess.x_enc, ROLE_B, y1,
                              n, part.d_a, k)
        # cross 2: B's block times A's share of the B-columns
        y2 = mu.slice_cols(part.d_a, d).m.transpose() if sess.role == ROLE_A else None
        if sess.cfg.sparse:
            j2 = _joint_sparse(sess, ROLE_B, sess.x_csr, y2, n, k)
        else:
            j2 = _joint_dense(sess, ROLE_B, sess.x_enc, ROLE_A, y2,
                              n, part.d_b, k)
        m_total = local + j1 + j2
    else:
        local = AShare(sess.role, sess.x_enc @ mu.m.transpose())
        y1 = mu.m.transpose() if sess.role == ROLE_B else None
        if sess.cfg.sparse:
            j1 = _joint_sparse(sess, ROLE_A, sess.x_csr, y1, part.n_a, k)
        else:
            j1 = _joint_dense(sess, ROLE_A, sess.x_enc, ROLE_B, y1,
                              part.n_a, d, k)
        y2 = mu.m.transpose() if sess.role == ROLE_A else None
        if sess.cfg.sparse:
            j2 = _joint_sparse(sess, ROLE_B, sess.x_csr, y2, part.n_b, k)
        else:
            j2 = _joint_dense(sess, ROLE_B, sess.x_enc, ROLE_A, y2,
                              part.n_b, d, k)
        block_a = (local if sess.role == ROLE_A else sess.zeros(part.n_a, k)) + j1
        block_b = (local if sess.role == ROLE_B else sess.zeros(part.n_b, k)) + j2
        m_total = _vstack([block_a, block_b])
    return u - m_total.scale_by(2)


# ---------------------------------------------------------------------------
# S2: assignment tree

@dataclass
class _Node:
    value: AShare               # (n, 1)
    pos: AShare | None          # (n, w); None = public width-1 leaf


def assign_clusters(sess: ProtocolSession, dprime: AShare) -> AShare:
    """One-hot argmin shares per row via the pairwise reduction tree."""
    n, k = dprime.shape
    ch, store = sess.channel, sess.store
    nodes = [_Node(dprime.slice_cols(j, j + 1), None) for j in range(k)]
    for level in tree_plan(k):
        new_nodes: list = []
        idx = 0
        pairs: list[tuple[_Node, _Node]] = []
        for op in level:
            if op[0] == "cmpm":
                pairs.append((nodes[idx], nodes[idx + 1]))
                new_nodes.append(None)          # filled after the batch below
                idx += 2
            else:
                new_nodes.append(nodes[idx])
                idx += 1
        if pairs:
            lval = _hstack([p[0].value for p in pairs])
            rval = _hstack([p[1].value for p in pairs])
            # right strictly smaller wins; ties keep the left (lower index)
            b = secure_cmp(ch, rval, lval, store)
            ones = sess.public_words(np.ones((n, len(pairs)), dtype=np.uint64))
            bbar = ones - b
            vals = mux(ch, b, rval, lval, store)
            # batch every position product at this level into one opening
            coef_blocks, oper_blocks, feeds = [], [], []
            for i, (ln, rn) in enumerate(pairs):
                for node, coef in ((ln, bbar), (rn, b)):
                    if node.pos is not None:
                        w = node.pos.shape[1]
                        coef_blocks.append(_tile_col(coef, i, w))
                        oper_blocks.append(node.pos)
                        feeds.append((i, node, w))
            prods = None
            if coef_blocks:
                coefs = _hstack(coef_blocks)
                opers = _hstack(oper_blocks)
                t = store.take_elementwise(coefs.shape)
                prods = beaver_mul(ch, coefs, opers, t)
            off = 0
            slot = 0
            for i, (ln, rn) in enumerate(pairs):
                parts = []
                for node, coef in ((ln, bbar), (rn, b)):
                    if node.pos is None:
                        parts.append(coef.slice_cols(i, i + 1))
                    else:
                        w = node.pos.shape[1]
                        parts.append(prods.slice_cols(off, off + w))
                        off += w
                while new_nodes[slot] is not None:
                    slot += 1
                new_nodes[slot] = _Node(vals.slice_cols(i, i + 1),
                                        _hstack(parts))
                slot += 1
        nodes = new_nodes
    root = nodes[0]
    pos = root.pos
    if pos is None:             # k == 1 never happens (k >= 2), safety net
        pos = sess.public_words(np.ones((n, 1), dtype=np.uint64))
    return pos


# ---------------------------------------------------------------------------
# S3: centroid update

def secure_reciprocal(sess: ProtocolSession, s: AShare, n_pub: int,
                      theta: int) -> AShare:
    """Fixed-point shares of 1/s for integer-valued shares s in [1, n_pub+1].

    Newton-Raphson against the public prescale P = 2^ceil(log2(n_pub+1)),
    iterated directly in the rescaled variable y = w/P (the same recurrence
    as w <- w(2 - (s/P) w), with the final 1/P rescale fused in).  Keeping y
    <= ~3 means every truncated product is tiny, so the probabilistic-shift
    failure bound stays negligible regardless of n_pub.  Relative error is
    within 2^-10 for theta = ceil(log2 n_pub) + 6.
    """
    fp = sess.fp
    f = fp.frac_bits
    p_log = max(1, math.ceil(math.log2(n_pub + 1)))
    if 2 * f < 2 * p_log + 2:
        raise ValueError("frac_bits too small for the reciprocal prescale")
    rows, cols = s.shape
    # y0 = (2.9142 - 2 s/P) / P, affine in the integer s; coefficients are
    # encoded at scale 2^2f so the 2/P^2 term survives quantization
    c1 = int(round(NR_INIT_CONST / (1 << p_log) * fp.scale * fp.scale))
    c2 = int(round(2.0 / (1 << (2 * p_log)) * fp.scale * fp.scale))
    c1_share = public_share(sess.role, RingMatrix(
        np.full((rows, cols), c1, dtype=np.uint64), fp.total_bits))
    y = truncate(c1_share - s.scale_by(c2), f)          # y0 at scale f
    two = sess.public(np.full((rows, cols), 2.0))
    for _ in range(theta):
        t1 = sess.store.take_elementwise((rows, cols))
        sy = beaver_mul(sess.channel, s, y, t1)          # integer * y: scale f
        e = two - sy
        t2 = sess.store.take_elementwise((rows, cols))
        y = truncate(beaver_mul(sess.channel, y, e, t2), f)
    return y


def update_centroids(sess: ProtocolSession, c: AShare, mu_old: AShare) -> AShare:
    """Phantom-regularized mean update: (C^T X + mu_old) / (counts + 1)."""
    part = sess.cfg.partition
    fp = sess.fp
    f = fp.frac_bits
    k, d, n = sess.cfg.k, part.d, part.n
    ct_mine = c.m.transpose()

    if part.mode == "vertical":
        if sess.role == ROLE_A:
            local = AShare(sess.role, ct_mine @ sess.x_enc)     # (k, d_a)
        else:
            local = AShare(sess.role, ct_mine @ sess.x_enc)     # (k, d_b)
        if sess.cfg.sparse:
            # cross A-columns: B's share of C against A's block
            if sess.role == ROLE_A:
                ja = _joint_sparse(sess, ROLE_A,
                                   SparsePlainMatrix.from_dense(sess.x_enc.transpose()),
                                   None, part.d_a, k).transpose()
            else:
                ja = _joint_sparse(sess, ROLE_A, None, c.m, part.d_a, k).transpose()
            if sess.role == ROLE_B:
                jb = _joint_sparse(sess, ROLE_B,
                                   SparsePlainMatrix.from_dense(sess.x_enc.transpose()),
                                   None, part.d_b, k).transpose()
            else:
                jb = _joint_sparse(sess, ROLE_B, None, c.m, part.d_b, k).transpose()
        else:
            ja = _joint_dense(sess, ROLE_B, ct_mine if sess.role == ROLE_B else None,
                              ROLE_A, sess.x_enc if sess.role == ROLE_A else None,
                              k, n, part.d_a)
            jb = _joint_dense(sess, ROLE_A, ct_mine if sess.role == ROLE_A else None,
                              ROLE_B, sess.x_enc if sess.role == ROLE_B else None,
                              k, n, part.d_b)
        col_a = (local if sess.role == ROLE_A else sess.zeros(k, part.d_a)) + ja
        col_b = (local if sess.role == ROLE_B else sess.zeros(k, part.d_b)) + jb
        numerator = _hstack([col_a, col_b])
    else:
        rows_lo, rows_hi = (0, part.n_a) if sess.role == ROLE_A \
            else (part.n_a, n)
        local = AShare(sess.role, RingMatrix(
            c.m.words[rows_lo:rows_hi, :].T @ sess.x_enc.words, fp.total_bits))
        if sess.cfg.sparse:
            if sess.role == ROLE_A:
                ja = _joint_sparse(sess, ROLE_A,
                                   SparsePlainMatrix.from_dense(sess.x_enc.transpose()),
                                   None, d, k).transpose()
            else:
                ja = _joint_sparse(sess, ROLE_A, None,
                                   RingMatrix(c.m.words[0:part.n_a, :].copy(),
                                              fp.total_bits), d, k).transpose()
            if sess.role == ROLE_B:
                jb = _joint_sparse(sess, ROLE_B,
                                   SparsePlainMatrix.from_dense(sess.x_enc.transpose()),
                                   None, d, k).transpose()
            else:
                jb = _joint_sparse(sess, ROLE_B, None,
                                   RingMatrix(c.m.words[part.n_a:n, :].copy(),
                                              fp.total_bits), d, k).transpose()
        else:
            # block of A's rows pairs B's share slice with A's data, and
            # vice versa for B's rows
            c_top_t = RingMatrix(c.m.words[0:part.n_a, :].T.copy(), fp.total_bits)
            c_bot_t = RingMatrix(c.m.words[part.n_a:n, :].T.copy(), fp.total_bits)
            ja = _joint_dense(sess, ROLE_B, c_top_t if sess.role == ROLE_B else None,
                              ROLE_A, sess.x_enc if sess.role == ROLE_A else None,
                              k, part.n_a, d)
            jb = _joint_dense(sess, ROLE_A, c_bot_t if sess.role == ROLE_A else None,
                              ROLE_B, sess.x_enc if sess.role == ROLE_B else None,
                              k, part.n_b, d)
        numerator = local + ja + jb
    numerator = numerator + mu_old                     # phantom numerator

    counts = c.m.words.sum(axis=0)[None, :]            # (1, k) integer scale
    s = AShare(sess.role, RingMatrix(counts, fp.total_bits))
    if sess.role == ROLE_A:                            # phantom denominator
        s = AShare(sess.role, RingMatrix(s.m.words + np.uint64(1), fp.total_bits))
    recip = secure_reciprocal(sess, s, n, sess.cfg.reciprocal_iters)

    tiled = AShare(sess.role, RingMatrix(
        np.tile(recip.m.words.T, (1, d)), fp.total_bits))
    t = sess.store.take_elementwise((k, d))
    return truncate(beaver_mul(sess.channel, numerator, tiled, t), f)


def convergence_check(sess: ProtocolSession, mu_old: AShare, mu_new: AShare,
                      epsilon: float) -> bool:
    """Open one bit: total squared centroid displacement < epsilon.

    The displacement is compared at scale 2^2f (the exact square-sum of the
    encoded difference), so no truncation happens on the way to the sign.
    """
    fp = sess.fp
    diff = mu_old - mu_new
    t = sess.store.take_elementwise(diff.shape)
    sq = beaver_mul(sess.channel, diff, diff, t)
    total = np.uint64(sq.m.words.sum())
    tot = AShare(sess.role, RingMatrix(np.array([[total]]), fp.total_bits))
    eps_word = int(round(epsilon * fp.scale * fp.scale)) & fp.mask
    delta = tot - public_share(sess.role,
                               RingMatrix(np.array([[eps_word]], dtype=np.uint64),
                                          fp.total_bits))
    sign = msb(sess.channel, delta, sess.store)
    return bool(open_bits(sess.channel, sign)[0, 0])


# ---------------------------------------------------------------------------
# initialization

def _share_block_exchange(sess: ProtocolSession, mine: RingMatrix,
                          theirs_shape: tuple[int, int]) -> tuple[AShare, AShare]:
    """Both parties secret-share a block they hold, concurrently.

    Returns (my share of my block, my share of the peer's block).
    """
    sa, sb = share(mine, sess.sampler)
    keep, send_out = (sa, sb) if sess.role == ROLE_A else (sb, sa)
    got = sess.channel.exchange(send_out.m.serialize())
    theirs = RingMatrix.deserialize(got.payload, sess.fp.total_bits)
    if theirs.shape != theirs_shape:
        raise ConfigMismatchError("peer sent a block of unexpected shape")
    return AShare(sess.role, keep.m), AShare(sess.role, theirs)


def _joint_coin(sess: ProtocolSession) -> RingSampler:
    mine = sess.sampler.derive("init-coin").randbytes(16)
    got = sess.channel.exchange(mine, MSG_CONTROL)
    joint = bytes(a ^ b for a, b in zip(mine, got.payload))
    return RingSampler(joint)


def _distinct_indexes(coin: RingSampler, k: int, n: int) -> list[int]:
    picked: list[int] = []
    while len(picked) < k:
        c = coin.below(n)
        if c not in picked:          # duplicates re-drawn
            picked.append(c)
    return picked


def initial_centroids(sess: ProtocolSession) -> AShare:
    cfg = sess.cfg
    part = cfg.partition
    k = cfg.k
    if cfg.init == "explicit":
        return sess.public(cfg.explicit_centroids)

    if cfg.init == "random":
        idx = _distinct_indexes(_joint_coin(sess), k, part.n)
        if part.mode == "vertical":
            mine = RingMatrix(sess.x_enc.words[np.array(idx), :],
                              sess.fp.total_bits)
            peer_cols = part.d_b if sess.role == ROLE_A else part.d_a
            my_blk, peer_blk = _share_block_exchange(sess, mine, (k, peer_cols))
            blocks = (my_blk, peer_blk) if sess.role == ROLE_A \
                else (peer_blk, my_blk)
            return _hstack(list(blocks))
        # horizontal: each selected row lives wholly at one party
        mine_rows = [i for i in idx if (i < part.n_a) == (sess.role == ROLE_A)]
        my_local = np.array([i if sess.role == ROLE_A else i - part.n_a
                             for i in mine_rows], dtype=np.int64)
        mine = RingMatrix(sess.x_enc.words[my_local, :].reshape(len(mine_rows), part.d),
                          sess.fp.total_bits)
        theirs_cnt = k - len(mine_rows)
        my_blk, peer_blk = _share_block_exchange(sess, mine, (theirs_cnt, part.d))
        ordered = []
        next_mine = next_theirs = 0
        for i in idx:
            if (i < part.n_a) == (sess.role == ROLE_A):
                ordered.append(my_blk.slice_rows(next_mine, next_mine + 1))
                next_mine += 1
            else:
                ordered.append(peer_blk.slice_rows(next_theirs, next_theirs + 1))
                next_theirs += 1
        return _vstack(ordered)

    # local-kmeans: each party clusters its own block, then shares the result
    pick = sess.sampler.derive("local-init")
    local_n = sess.x_float.shape[0]
    init_idx = _distinct_indexes(pick, k, local_n)
    local = plaintext_kmeans(sess.x_float, k, sess.x_float[init_idx],
                             max_iters=10)
    cents = encode_matrix(local.centroids, sess.fp)
    if part.mode == "vertical":
        peer_cols = part.d_b if sess.role == ROLE_A else part.d_a
        my_blk, peer_blk = _share_block_exchange(sess, cents, (k, peer_cols))
        blocks = (my_blk, peer_blk) if sess.role == ROLE_A else (peer_blk, my_blk)
        return _hstack(list(blocks))
    take_a = (k + 1) // 2
    mine_cnt = take_a if sess.role == ROLE_A else k - take_a
    mine = RingMatrix(cents.words[:mine_cnt, :], sess.fp.total_bits)
    my_blk, peer_blk = _share_block_exchange(sess, mine, (k - mine_cnt, part.d))
    blocks = (my_blk, peer_blk) if sess.role == ROLE_A else (peer_blk, my_blk)
    return _vstack(list(blocks))


# ---------------------------------------------------------------------------
# the full run

def _check_config(sess: ProtocolSession):
    digest = sess.cfg.digest(sess.store.session)
    got = sess.channel.exchange(digest, MSG_CONTROL)
    if got.payload != digest:
        raise ConfigMismatchError(
            "peer config digest differs (config fields or dealer session)")


def _exchange_keys(sess: ProtocolSession):
    if sess.keypair is None:
        sess.keypair = ahe.keygen(sess.cfg.he_key_bits,
                                  allow_short=sess.cfg.he_key_bits < 2048)
    if sess.role == ROLE_A:
        ahe.send_public_key(sess.channel, sess.keypair.pub)
        sess.peer_pub = ahe.recv_public_key(sess.channel)
    else:
        sess.peer_pub = ahe.recv_public_key(sess.channel)
        ahe.send_public_key(sess.channel, sess.keypair.pub)


def run_protocol(channel: Channel, role: str, x_local: np.ndarray,
                 cfg: KMeansConfig, store: TripleStore,
                 keypair: ahe.PaillierKeyPair | None = None,
                 debug_open_assignments: bool = False) -> RunResult:
    """Execute the whole protocol for one party.

    x_local is this party's plaintext block as reals.  In vertical mode it
    is min-max normalized locally (each party owns whole columns); in
    horizontal mode inputs must already be normalized to [0, 1].
    """
    part = cfg.partition
    if x_local.shape != part.local_shape(role):
        raise ValueError(f"local data shape {x_local.shape} != "
                         f"{part.local_shape(role)} for role {role}")
    if part.n < cfg.k:
        raise ValueError("need n >= k")
    x_float = normalize_minmax(x_local) \
        if (cfg.normalize and part.mode == "vertical") else \
        np.asarray(x_local, dtype=np.float64)
    x_enc = encode_matrix(x_float, cfg.fixed_point)
    sess = ProtocolSession(
        role=role, channel=channel, cfg=cfg, store=store,
        sampler=RingSampler(_party_seed(cfg.seed, role)),
        x_float=x_float, x_enc=x_enc,
        x_csr=SparsePlainMatrix.from_dense(x_enc) if cfg.sparse else None,
        keypair=keypair)

    channel.set_context(PHASE_ONLINE, STEP_OTHER)
    store.set_step(STEP_OTHER)
    _check_config(sess)
    if cfg.sparse:
        channel.set_context(PHASE_OFFLINE, STEP_OTHER)
        _exchange_keys(sess)
        channel.set_context(PHASE_ONLINE, STEP_OTHER)

    mu = initial_centroids(sess)
    c_share = sess.zeros(part.n, cfg.k)
    trajectory: list | None = [] if debug_open_assignments else None
    stopped = False
    iters_run = 0
    step_seconds: dict = {}

    def _tick(step_name, t0):
        step_seconds[step_name] = step_seconds.get(step_name, 0.0) \
            + (time.perf_counter() - t0)

    for _ in range(cfg.max_iters):
        channel.set_context(PHASE_ONLINE, STEP_S1)
        store.set_step(STEP_S1)
        t0 = time.perf_counter()
        dprime = reduced_distances(sess, mu)
        channel.metrics.add_time(PHASE_ONLINE, STEP_S1, time.perf_counter() - t0)
        _tick("S1", t0)

        channel.set_context(PHASE_ONLINE, STEP_S2)
        store.set_step(STEP_S2)
        t0 = time.perf_counter()
        c_share = assign_clusters(sess, dprime)
        channel.metrics.add_time(PHASE_ONLINE, STEP_S2, time.perf_counter() - t0)
        _tick("S2", t0)

        if trajectory is not None:
            channel.set_context(PHASE_ONLINE, STEP_OTHER)
            opened = open_share(channel, c_share)
            trajectory.append(np.argmax(opened.words, axis=1))

        channel.set_context(PHASE_ONLINE, STEP_S3)
        store.set_step(STEP_S3)
        t0 = time.perf_counter()
        mu_new = update_centroids(sess, c_share, mu)
        stop = convergence_check(sess, mu, mu_new, cfg.epsilon)
        channel.metrics.add_time(PHASE_ONLINE, STEP_S3, time.perf_counter() - t0)
        _tick("S3", t0)

        mu = mu_new
        iters_run += 1
        if stop:
            stopped = True
            break

    channel.set_context(PHASE_ONLINE, STEP_OTHER)
    store.set_step(STEP_OTHER)
    opened_mu = opened_c = None
    if cfg.open_results:
        mu_pub = open_share(channel, mu)
        c_pub = open_share(channel, c_share)
        opened_mu = decode_matrix(mu_pub, cfg.fixed_point)
        opened_c = np.argmax(c_pub.words, axis=1)

    surplus = sess.store.warn_if_surplus() if iters_run == cfg.max_iters \
        and not stopped else 0
    metrics = channel.metrics_snapshot()
    got = channel.exchange(json.dumps(metrics.to_dict()).encode(), MSG_METRICS)
    peer_metrics = json.loads(got.payload.decode())

    return RunResult(
        role=role, metrics=metrics, iters_run=iters_run, stopped_early=stopped,
        mu_share=mu, c_share=c_share,
        store_bytes=dict(sess.store.consumed_bytes),
        store_surplus=surplus,
        opened_centroids=opened_mu, opened_assignments=opened_c,
        trajectory=trajectory, peer_metrics=peer_metrics,
        step_seconds=step_seconds)


def _party_seed(seed: bytes, role: str) -> bytes:
    return hashlib.sha256(seed + b"party" + role.encode()).digest()[:16]

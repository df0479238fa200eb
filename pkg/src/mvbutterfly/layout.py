"""Parallel data layouts for butterfly products and their communication cost.

``p = 2**q`` virtual processes own the blocks of a hybrid butterfly. Two
owner maps cover a level-``j`` block ``(tau, mu)`` (``tau`` at target level
``j``, ``mu`` at source level ``L - j``):

* column-wise: target subtrees are split while ``j >= q``; above that the
  ``q - j`` low bits of ``mu``, bit-reversed, pick the process;
* row-wise: the mirror image with the roles of the two trees swapped.

The column layout runs the whole chain with the column-wise map, the row
layout with the row-wise map, and the hybrid layout uses the row-wise map on
the ``V``/``W`` side and the column-wise map on the ``R``/``U`` side. Leaf
bases live with the 1D-row owners of their leaves. A product then needs
pairwise exchanges wherever a transfer step crosses processes, and exactly
one all-to-all where the vector changes between a 1D-row layout and an
index-reversed one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .butterfly import HybridButterfly

KINDS = ("column", "row", "hybrid")


def _is_pow2(x: int) -> bool:
    return x >= 1 and x & (x - 1) == 0


def bit_reverse(x: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (x & 1)
        x >>= 1
    return out


@dataclass(frozen=True)
class LayoutSpec:
    p: int
    kind: str
    L: int
    r: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.L < 0 or self.r < 0:
            raise ValueError("L and r must be nonnegative")
        if not _is_pow2(self.p):
            raise ValueError(f"process count must be a power of two, got {self.p}")
        if self.p > 2**self.L:
            raise ValueError(f"p = {self.p} exceeds the 2**L = {2 ** self.L} leaves")

    @property
    def q(self) -> int:
        return self.p.bit_length() - 1


@dataclass(frozen=True)
class CommCostReport:
    """Per-process volumes (scalars per right-hand side) and message counts."""

    exchange_volume: int
    exchange_msgs: int
    alltoall_volume: int
    alltoall_msgs: int

    def model_time(self, alpha: float, beta: float) -> float:
        """Latency-bandwidth estimate ``alpha * messages + beta * volume``."""
        return alpha * (self.exchange_msgs + self.alltoall_msgs) + beta * (self.exchange_volume + self.alltoall_volume)

    def as_dict(self) -> dict:
        return asdict(self)


def comm_cost(spec: LayoutSpec) -> CommCostReport:
    """Closed-form costs of one product under the constant-rank model ``n = r 2**L``."""
    L, q, p, r = spec.L, spec.q, spec.p, spec.r
    share = r * 2**L // p
    levels = q if spec.kind in ("column", "row") else max(0, 2 * q - L)
    # a single process has nothing to redistribute
    a2a = share if p > 1 else 0
    return CommCostReport(share * levels, levels, a2a, min(2**L // p, p - 1))


# ----------------------------------------------------------------------------
# ownership


def owner_1d(L: int, q: int, leaf: int) -> int:
    return leaf >> (L - q)


def owner_col(L: int, q: int, j: int, tau: int, mu: int) -> int:
    if j >= q:
        return tau >> (j - q)
    b = q - j
    return (tau << b) | bit_reverse(mu & ((1 << b) - 1), b)


def owner_row(L: int, q: int, j: int, tau: int, mu: int) -> int:
    if L - j >= q:
        return mu >> (L - j - q)
    b = q - L + j
    return (mu << b) | bit_reverse(tau & ((1 << b) - 1), b)


def stage_owners(spec: LayoutSpec):
    """``(owner_v, owner_u)``: maps ``(j, tau, mu) -> process`` for the two halves of the chain."""
    L, q = spec.L, spec.q

    def col(j, t, m):
        return owner_col(L, q, j, t, m)

    def row(j, t, m):
        return owner_row(L, q, j, t, m)

    return {"column": (col, col), "row": (row, row), "hybrid": (row, col)}[spec.kind]


@dataclass
class OwnershipMap:
    spec: LayoutSpec
    blocks: dict = field(default_factory=dict)

    def owner(self, name: str, *key) -> int:
        return self.blocks[(name, *key)]

    def per_process(self) -> list:
        counts = [0] * self.spec.p
        for proc in self.blocks.values():
            counts[proc] += 1
        return counts


def assign_ownership(bf: HybridButterfly, spec: LayoutSpec) -> OwnershipMap:
    """Owning process of every stored block.

    Leaf bases follow the 1D-row layout, ``W`` and ``B`` blocks sit with the
    process producing their output, and ``R`` blocks with the process
    holding their input.
    """
    if bf.L != spec.L:
        raise ValueError(f"butterfly has L={bf.L}, layout expects L={spec.L}")
    bf.validate(orth_tol=None)
    L, q, lm = spec.L, spec.q, bf.lm
    own_v, own_u = stage_owners(spec)
    om = OwnershipMap(spec)
    for tau in range(2**L):
        om.blocks[("U", tau)] = owner_1d(L, q, tau)
    for l in range(L - 1, lm - 1, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                om.blocks[("R", l, tau, nu)] = own_u(l, tau, nu)
    for tau in range(2**lm):
        for nu in range(2 ** (L - lm)):
            om.blocks[("B", tau, nu)] = own_v(lm, tau, nu)
    for l in range(lm, 0, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                om.blocks[("W", l, tau, nu)] = own_v(l, tau, nu)
    for nu in range(2**L):
        om.blocks[("V", nu)] = owner_1d(L, q, nu)
    return om


# ----------------------------------------------------------------------------
# simulated product


class _Tally:
    def __init__(self, p: int):
        self.p = p
        self.exch_vol = np.zeros(p, dtype=np.int64)
        self.exch_msgs = np.zeros(p, dtype=np.int64)
        self.exchange_stages = 0
        self.a2a_vol = 0
        self.a2a_msgs = 0
        self.stray_volume = 0

    def exchange(self, sends):
        """``sends``: iterable of ``(src, dst, size)``; local transfers are ignored."""
        vol = np.zeros(self.p, dtype=np.int64)
        dests = [set() for _ in range(self.p)]
        for src, dst, size in sends:
            if src != dst:
                vol[src] += size
                dests[src].add(dst)
        if vol.any():
            self.exchange_stages += 1
        self.exch_vol += vol
        self.exch_msgs += np.array([len(d) for d in dests])

    def redistribute(self, moves, collective: bool):
        """``moves``: ``(src, dst, size)`` per vector block.

        The layout's all-to-all counts every process's full local share;
        any other redistribution must be local and only records stray traffic.
        """
        share = np.zeros(self.p, dtype=np.int64)
        dests = [set() for _ in range(self.p)]
        for src, dst, size in moves:
            share[src] += size
            if src != dst:
                dests[src].add(dst)
                if not collective:
                    self.stray_volume += size
        if collective and self.p > 1:
            self.a2a_vol = int(share.max())
            self.a2a_msgs = max(len(d) for d in dests)

    def report(self) -> CommCostReport:
        return CommCostReport(int(self.exch_vol.max()), int(self.exch_msgs.max()), self.a2a_vol, self.a2a_msgs)


def simulated_parallel_apply(bf: HybridButterfly, X: np.ndarray, spec: LayoutSpec, threads: int | None = None):
    """``K @ X`` computed by ``spec.p`` virtual processes over the ownership map.

    Returns ``(Y, report, details)``. Each process computes only the blocks
    it owns; every value a process reads from another is tallied. Volumes
    count vector entries per right-hand side. ``details`` holds the number
    of stages with remote exchange and any traffic outside the designated
    all-to-all (zero for every valid layout).
    """
    m, n = bf.shape
    X = np.asarray(X)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    if X.shape[0] != n:
        raise ValueError(f"expected {n} rows, got shape {X.shape}")
    om = assign_ownership(bf, spec)
    L, q, lm, p = spec.L, spec.q, bf.lm, spec.p
    own_v, own_u = stage_owners(spec)
    tt, ts = bf.tree_t, bf.tree_s
    tally = _Tally(p)
    workers = min(p, threads or 8)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def run(fn, groups):
        if pool is None:
            return [fn(g) for g in groups]
        return list(pool.map(fn, groups))

    def by_owner(keys, owner):
        groups = [[] for _ in range(p)]
        for key in keys:
            groups[owner(key)].append(key)
        return groups

    try:
        Xt = X[ts.perm]
        # leaf row bases at the 1D owners of the source leaves
        def leaf_v(keys):
            out = {}
            for nu in keys:
                a, b = ts.node_range(L, nu)
                out[(0, nu)] = bf.V[nu].T @ Xt[a:b]
            return out

        y = {}
        for part in run(leaf_v, by_owner(range(2**L), lambda nu: om.owner("V", nu))):
            y.update(part)
        tally.redistribute(
            [(owner_1d(L, q, nu), own_v(0, 0, nu), y[(0, nu)].shape[0]) for nu in range(2**L)],
            collective=spec.kind == "column",
        )
        # row transfer stages: consumers gather their two inputs
        for j in range(1, lm + 1):
            nq = 2 ** (L - j)
            keys = [(t, v) for t in range(2**j) for v in range(nq)]
            sends = []
            for t, v in keys:
                dst = own_v(j, t, v)
                for c in (2 * v, 2 * v + 1):
                    sends.append((own_v(j - 1, t // 2, c), dst, y[(t // 2, c)].shape[0]))
            tally.exchange(sends)

            def stage_w(ks, j=j, y=y):
                return {
                    (t, v): bf.W[(j, t, v)].T @ np.concatenate([y[(t // 2, 2 * v)], y[(t // 2, 2 * v + 1)]])
                    for t, v in ks
                }

            nxt = {}
            for part in run(stage_w, by_owner(keys, lambda k, j=j: own_v(j, *k))):
                nxt.update(part)
            y = nxt
        # core blocks with their W owner, then switch to the column-side owners
        keys = [(t, v) for t in range(2**lm) for v in range(2 ** (L - lm))]

        def stage_b(ks):
            return {k: bf.B[k] @ y[k] for k in ks}

        z = {}
        for part in run(stage_b, by_owner(keys, lambda k: om.owner("B", *k))):
            z.update(part)
        tally.redistribute(
            [(own_v(lm, *k), own_u(lm, *k), z[k].shape[0]) for k in keys],
            collective=spec.kind == "hybrid",
        )
        # column transfer stages: input owners send partial sums to the children
        for l in range(lm, L):
            nq = 2 ** (L - l)
            keys = [(t, v) for t in range(2**l) for v in range(nq)]

            def stage_r(ks, l=l, z=z):
                parts = []
                for t, v in ks:
                    w = bf.R[(l, t, v)] @ z[(t, v)]
                    r1 = bf.rank_u(l + 1, 2 * t, v // 2)
                    parts.append(((2 * t, v // 2), v, w[:r1]))
                    parts.append(((2 * t + 1, v // 2), v, w[r1:]))
                return parts

            sends = []
            for t, v in keys:
                src = own_u(l, t, v)
                for c in (2 * t, 2 * t + 1):
                    sends.append((src, own_u(l + 1, c, v // 2), bf.rank_u(l + 1, c, v // 2)))
            tally.exchange(sends)
            partials = {}
            for part in run(stage_r, by_owner(keys, lambda k, l=l: own_u(l, *k))):
                for child, order, val in part:
                    partials.setdefault(child, []).append((order, val))
            z = {}
            for child, vals in partials.items():
                vals.sort(key=lambda ov: ov[0])
                acc = vals[0][1]
                for _, val in vals[1:]:
                    acc = acc + val
                z[child] = acc
        tally.redistribute(
            [(own_u(L, s, 0), owner_1d(L, q, s), z[(s, 0)].shape[0]) for s in range(2**L)],
            collective=spec.kind == "row",
        )

        def leaf_u(keys):
            return {s: bf.U[s] @ z[(s, 0)] for s in keys}

        out_t = np.zeros((m, X.shape[1]), dtype=np.result_type(bf.dtype, X.dtype))
        for part in run(leaf_u, by_owner(range(2**L), lambda s: om.owner("U", s))):
            for s, val in part.items():
                a, b = tt.node_range(L, s)
                out_t[a:b] = val
    finally:
        if pool is not None:
            pool.shutdown()
    out = np.empty_like(out_t)
    out[tt.perm] = out_t
    details = {"exchange_stages": tally.exchange_stages, "stray_volume": tally.stray_volume}
    return (out[:, 0] if vec else out), tally.report(), details


COMM_COLUMNS = ("kind", "L", "r", "p", "exch_vol", "exch_msgs", "a2a_vol", "a2a_msgs")


def comm_row(spec: LayoutSpec, report: CommCostReport) -> dict:
    return {
        "kind": spec.kind,
        "L": spec.L,
        "r": spec.r,
        "p": spec.p,
        "exch_vol": report.exchange_volume,
        "exch_msgs": report.exchange_msgs,
        "a2a_vol": report.alltoall_volume,
        "a2a_msgs": report.alltoall_msgs,
    }

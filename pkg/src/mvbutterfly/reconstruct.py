"""Adaptive randomized hybrid butterfly reconstruction from black-box products.

The driver :func:`factorize` runs four phases against a
:class:`~mvbutterfly.operators.BlackBoxOperator`:

1. leaf row bases ``V`` from ``K^T Gamma`` with a root probe, doubling the rank
   guess until it exceeds every revealed leaf rank;
2. leaf column bases ``U`` from ``K Omega``, likewise;
3. row transfer blocks ``W`` at levels ``1 .. lm``, one structured probe per
   target node;
4. column transfer blocks ``R`` at levels ``L-1 .. lm``, one structured probe
   per source node, with the core blocks ``B`` fitted at ``lm``.

Samples are projected onto already computed nested bases without forming
those bases explicitly: a product restricted to one node only ever travels
up (or down) a single ancestor chain of transfer blocks.
"""

from __future__ import annotations

import json
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import butterfly as bfm
from .butterfly import HybridButterfly
from .hier import PartitionTree
from .linalg import RankCapWarning, gaussian_matrix, pinv_solve, pivoted_qr_truncate

# probe-stream ids mixed into every per-node seed
PHASE_LEAF_V, PHASE_LEAF_U, PHASE_W, PHASE_R, PHASE_CORE, PHASE_ERROR = 0, 1, 2, 3, 4, 9

TRANSFER_RULES = ("child_sum", "max_child")


class SequencingError(RuntimeError):
    """A phase was requested before the blocks it depends on exist."""


@dataclass(frozen=True)
class ReconstructionConfig:
    """Parameters of one reconstruction.

    ``transfer_rank`` picks the probe width at transfer levels:
    ``child_sum`` (default) uses the sum of the two child ranks, an upper
    bound on the block rank; ``max_child`` uses the larger child rank, the
    width assumed by the usual ``2 (r + p) (1 + 2 + ... + 2**lm)`` cost
    count. ``literal_core`` fits core blocks with a plain transpose instead
    of the pseudo-inverse (for comparison only). ``truncation`` selects the
    rank cut of every pivoted QR: ``tail`` (default) bounds the Frobenius
    norm of each sample's discarded part by ``eps |R_00|``, which keeps every
    block error near ``eps ||K_b||_F``; ``diag`` applies the looser single
    pivot test ``|R_kk| <= eps |R_00|``.
    """

    eps: float = 1e-6
    oversample: int = 2
    r0: int = 4
    L: int | None = None
    lm: int | None = None
    seed: int = 0
    cap: int | None = None
    transfer_rank: str = "child_sum"
    truncation: str = "tail"
    literal_core: bool = False
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.oversample < 0:
            raise ValueError("oversampling must be >= 0")
        if self.r0 < 1:
            raise ValueError("initial rank guess must be >= 1")
        if self.cap is not None and self.cap < 1:
            raise ValueError("rank cap must be >= 1")
        if self.transfer_rank not in TRANSFER_RULES:
            raise ValueError(f"transfer_rank must be one of {TRANSFER_RULES}")
        if self.truncation not in ("tail", "diag"):
            raise ValueError("truncation must be 'tail' or 'diag'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def center_level(self, L: int) -> int:
        if self.L is not None and self.L != L:
            raise ValueError(f"config asks for L={self.L} but the trees have depth {L}")
        lm = L // 2 if self.lm is None else self.lm
        if not 0 <= lm <= L:
            raise ValueError(f"center level {lm} outside [0, {L}]")
        return lm


@dataclass
class StructuredProbe:
    """Random block whose nonzero rows are the points of one tree node.

    ``side`` is ``"source"`` for probes multiplied by ``K`` (rows indexed by
    the source tree) and ``"target"`` for probes multiplied by ``K^T``.
    ``core`` holds the rows of the node in tree order.
    """

    side: str
    tree: PartitionTree
    level: int
    node: int
    core: np.ndarray

    def __post_init__(self):
        if self.side not in ("source", "target"):
            raise ValueError("side must be 'source' or 'target'")
        rows = self.tree.node_size(self.level, self.node)
        if self.core.ndim != 2 or self.core.shape[0] != rows:
            raise ValueError(f"probe core has shape {self.core.shape}, node holds {rows} points")

    @property
    def width(self) -> int:
        return self.core.shape[1]

    def full(self) -> np.ndarray:
        """Zero-padded probe in the operator's original index order."""
        out = np.zeros((self.tree.n, self.width), dtype=self.core.dtype)
        out[self.tree.indices(self.level, self.node)] = self.core
        return out


class ProbeTracker:
    """Counts probe products held in memory at once."""

    def __init__(self):
        self._lock = threading.Lock()
        self.resident = 0
        self.resident_bytes = 0
        self.peak = 0
        self.peak_bytes = 0

    @contextmanager
    def hold(self, arr: np.ndarray):
        with self._lock:
            self.resident += 1
            self.resident_bytes += arr.nbytes
            self.peak = max(self.peak, self.resident)
            self.peak_bytes = max(self.peak_bytes, self.resident_bytes)
        try:
            yield arr
        finally:
            with self._lock:
                self.resident -= 1
                self.resident_bytes -= arr.nbytes


def probe_with(op, probe: StructuredProbe) -> np.ndarray:
    """One black-box product with a zero-padded probe (original index order)."""
    m, n = op.shape
    if probe.side == "source":
        if probe.tree.n != n:
            raise ValueError(f"source probe height {probe.tree.n} does not match n={n}")
        return op.apply(probe.full())
    if probe.tree.n != m:
        raise ValueError(f"target probe height {probe.tree.n} does not match m={m}")
    return op.apply_transpose(probe.full())


@dataclass
class FactorizationLog:
    phases: dict = field(default_factory=dict)
    leaf_widths_v: list = field(default_factory=list)
    leaf_widths_u: list = field(default_factory=list)
    capped_v: bool = False
    capped_u: bool = False
    forward_cols: int = 0
    transpose_cols: int = 0
    peak_resident_probes: int = 0
    peak_probe_bytes: int = 0
    seconds: float = 0.0

    @property
    def rounds_v(self) -> int:
        return len(self.leaf_widths_v)

    @property
    def rounds_u(self) -> int:
        return len(self.leaf_widths_u)

    @property
    def leaf_cols(self) -> int:
        return sum(self.leaf_widths_v) + sum(self.leaf_widths_u)

    @property
    def total_cols(self) -> int:
        return self.forward_cols + self.transpose_cols

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(rounds_v=self.rounds_v, rounds_u=self.rounds_u, leaf_cols=self.leaf_cols, total_cols=self.total_cols)
        return d

    def to_json(self, timings: bool = True) -> str:
        d = self.to_dict()
        if not timings:
            d.pop("seconds")
            d["phases"] = {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in d["phases"].items()}
        return json.dumps(d, indent=2, sort_keys=True)


class Reconstruction:
    """Partial factorization plus the bookkeeping shared by the phase functions."""

    def __init__(self, op, tree_t: PartitionTree, tree_s: PartitionTree, cfg: ReconstructionConfig):
        if op.shape != (tree_t.n, tree_s.n):
            raise ValueError(f"operator shape {op.shape} does not match trees ({tree_t.n}, {tree_s.n})")
        self.op = op
        self.cfg = cfg
        self.bf = HybridButterfly(tree_t, tree_s, cfg.center_level(tree_t.L))
        self.log = FactorizationLog()
        self.tracker = ProbeTracker()
        self.complex = op.dtype.kind == "c"
        self.done = set()

    @property
    def L(self) -> int:
        return self.bf.L

    @property
    def lm(self) -> int:
        return self.bf.lm

    def gaussian(self, rows: int, cols: int, phase: int, level: int, node: int, rnd: int = 0) -> np.ndarray:
        return gaussian_matrix(rows, cols, (self.cfg.seed, phase, level, node, rnd), self.complex)

    def product(self, probe: StructuredProbe, out_tree: PartitionTree) -> np.ndarray:
        """Black-box product permuted into the tree order of ``out_tree``."""
        return probe_with(self.op, probe)[out_tree.perm]

    def map(self, fn, items):
        items = list(items)
        if self.cfg.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def require(self, *stages):
        for s in stages:
            if s not in self.done:
                raise SequencingError(f"stage {s!r} has not been computed yet")

    @contextmanager
    def phase(self, name: str):
        op = self.op
        f0, t0, c0 = op.cols_forward, op.cols_transpose, time.perf_counter()
        yield
        rec = self.log.phases.setdefault(name, {"forward_cols": 0, "transpose_cols": 0, "seconds": 0.0})
        rec["forward_cols"] += op.cols_forward - f0
        rec["transpose_cols"] += op.cols_transpose - t0
        rec["seconds"] += time.perf_counter() - c0


# ----------------------------------------------------------------------------
# projections onto nested bases


def v_project(bf: HybridButterfly, level: int, tau: int, Xt: np.ndarray) -> list:
    """``V_{tau,mu}^H X[S_mu]`` for every source node ``mu`` paired with target node ``(level, tau)``.

    ``Xt`` is in source-tree order. Only the ancestor chain of ``tau`` is
    visited.
    """
    L, ts = bf.L, bf.tree_s
    c = []
    for mu in range(2**L):
        a, b = ts.node_range(L, mu)
        c.append(bf.V[mu].conj().T @ Xt[a:b])
    for j in range(1, level + 1):
        tj = tau >> (level - j)
        c = [bf.W[(j, tj, mu)].conj().T @ np.concatenate([c[2 * mu], c[2 * mu + 1]]) for mu in range(2 ** (L - j))]
    return c


def u_project(bf: HybridButterfly, level: int, nu: int, Yt: np.ndarray) -> list:
    """``U_{sigma,nu}^H Y[T_sigma]`` for every target node ``sigma`` at ``level``.

    ``nu`` is a source node at level ``L - level``; ``Yt`` is in target-tree order.
    """
    L, tt = bf.L, bf.tree_t
    c = []
    for sigma in range(2**L):
        a, b = tt.node_range(L, sigma)
        c.append(bf.U[sigma].conj().T @ Yt[a:b])
    for j in range(L - 1, level - 1, -1):
        nj = nu >> (j - level)
        c = [bf.R[(j, s, nj)].conj().T @ np.concatenate([c[2 * s], c[2 * s + 1]]) for s in range(2**j)]
    return c


def v_transpose_probe(bf: HybridButterfly, level: int, nu: int, core: np.ndarray) -> list:
    """``V_{tau,nu}^T Omega`` for every target node ``tau`` at ``level``.

    ``core`` holds the rows of source node ``(L - level, nu)`` in tree order.
    The bases are applied through the subtree of ``nu`` without forming them.
    """
    L, ts = bf.L, bf.tree_s
    a0, _ = ts.node_range(L - level, nu)
    first = nu << level
    d = []
    for mu in range(first, first + 2**level):
        a, b = ts.node_range(L, mu)
        d.append(bf.V[mu].T @ core[a - a0 : b - a0])
    # d is indexed [tau_j * width + local_mu] with width = 2**(level - j)
    for j in range(1, level + 1):
        width = 2 ** (level - j)
        base = nu << (level - j)
        nxt = []
        for tj in range(2**j):
            for k in range(width):
                W = bf.W[(j, tj, base + k)]
                pw = 2 * width
                lo, hi = d[(tj // 2) * pw + 2 * k], d[(tj // 2) * pw + 2 * k + 1]
                nxt.append(W.T @ np.concatenate([lo, hi]))
        d = nxt
    return d


# ----------------------------------------------------------------------------
# core blocks


def _fit_core(coef: np.ndarray, vto: np.ndarray, literal: bool = False) -> np.ndarray:
    rU, w = coef.shape
    rV = vto.shape[0]
    if vto.shape[1] != w:
        raise ValueError("sample and V^T Omega widths differ")
    if rV > w:
        raise ValueError(f"V^T Omega is {rV}x{w}: the fit is underdetermined, use a wider probe")
    if rU == 0 or rV == 0:
        return np.zeros((rU, rV), dtype=np.result_type(coef, vto))
    if literal:
        return coef @ vto.T
    return coef @ pinv_solve(vto)


def core_block(U: np.ndarray, KOmega: np.ndarray, VtOmega: np.ndarray, literal: bool = False) -> np.ndarray:
    """Least-squares ``argmin_B ||K Omega - U B (V^T Omega)||_F`` for orthonormal ``U``."""
    return _fit_core(U.conj().T @ KOmega, VtOmega, literal)


def core_blocks(KOmega: dict, U: dict, VtOmega: dict, literal: bool = False) -> dict:
    """:func:`core_block` over matching keys."""
    return {k: core_block(U[k], KOmega[k], VtOmega[k], literal) for k in KOmega}


# ----------------------------------------------------------------------------
# phases


def _leaf_phase(state: Reconstruction, side: str):
    cfg, bf, op = state.cfg, state.bf, state.op
    m, n = op.shape
    if side == "V":
        probe_tree, out_tree, phase, ptype = bf.tree_t, bf.tree_s, PHASE_LEAF_V, "target"
    else:
        probe_tree, out_tree, phase, ptype = bf.tree_s, bf.tree_t, PHASE_LEAF_U, "source"
    L, p = state.L, cfg.oversample
    limit = cfg.cap if cfg.cap is not None else min(m, n)
    sizes = out_tree.level_sizes(L)
    full = np.minimum(sizes, probe_tree.n)
    widths = []
    r = cfg.r0
    capped = False
    while True:
        core = state.gaussian(probe_tree.n, r + p, phase, 0, 0, len(widths) + 1)
        widths.append(r + p)
        Yt = state.product(StructuredProbe(ptype, probe_tree, 0, 0, core), out_tree)
        with state.tracker.hold(Yt):
            bases = {}
            for leaf in range(2**L):
                a, b = out_tree.node_range(L, leaf)
                bases[leaf] = pivoted_qr_truncate(Yt[a:b], cfg.eps, cfg.truncation)
        ranks = np.array([bases[k].shape[1] for k in range(2**L)])
        if r > ranks.max() or np.all(ranks == full):
            break
        if r >= limit:
            capped = True
            warnings.warn(
                f"leaf {side} phase stopped at rank cap {limit} (max revealed rank {ranks.max()})",
                RankCapWarning,
                stacklevel=3,
            )
            break
        r = min(2 * r, limit)
    if side == "V":
        bf.V.update(bases)
        state.log.leaf_widths_v, state.log.capped_v = widths, capped
    else:
        bf.U.update(bases)
        state.log.leaf_widths_u, state.log.capped_u = widths, capped
    state.done.add(f"leaf{side}")


def leaf_row_bases(state: Reconstruction) -> dict:
    """Leaf row bases ``V[nu]`` for every source leaf; returns them."""
    with state.phase("leaf_V"):
        _leaf_phase(state, "V")
    return state.bf.V


def leaf_col_bases(state: Reconstruction) -> dict:
    """Leaf column bases ``U[tau]`` for every target leaf; returns them."""
    with state.phase("leaf_U"):
        _leaf_phase(state, "U")
    return state.bf.U


def _probe_rank(state: Reconstruction, pairs) -> int:
    if state.cfg.transfer_rank == "child_sum":
        return max((a + b for a, b in pairs), default=0)
    return max((max(a, b) for a, b in pairs), default=0)


def transfer_level_W(state: Reconstruction, l: int) -> dict:
    """Row transfer blocks at target level ``l`` (``1 <= l <= lm``)."""
    bf, cfg = state.bf, state.cfg
    L, p = state.L, cfg.oversample
    if not 1 <= l <= state.lm:
        raise ValueError(f"W levels run from 1 to {state.lm}, got {l}")
    state.require("leafV", *([f"W{l - 1}"] if l > 1 else []))
    if f"W{l}" in state.done:
        raise SequencingError(f"W level {l} already computed")
    nq = 2 ** (L - l)

    def task(tau):
        ptau = tau // 2
        pairs = [(bf.rank_v(l - 1, ptau, 2 * nu), bf.rank_v(l - 1, ptau, 2 * nu + 1)) for nu in range(nq)]
        rw = _probe_rank(state, pairs)
        dtype = np.complex128 if state.complex else np.float64
        if rw == 0:
            return [np.zeros((a + b, 0), dtype=dtype) for a, b in pairs]
        core = state.gaussian(bf.tree_t.node_size(l, tau), rw + p, PHASE_W, l, tau)
        Zt = state.product(StructuredProbe("target", bf.tree_t, l, tau, core), bf.tree_s)
        with state.tracker.hold(Zt):
            coef = v_project(bf, l - 1, ptau, Zt)
            return [pivoted_qr_truncate(np.concatenate([coef[2 * nu], coef[2 * nu + 1]]), cfg.eps, cfg.truncation) for nu in range(nq)]

    with state.phase(f"W{l}"):
        out = state.map(task, range(2**l))
    blocks = {}
    for tau, ws in enumerate(out):
        for nu, Wb in enumerate(ws):
            blocks[(l, tau, nu)] = Wb
    bf.W.update(blocks)
    state.done.add(f"W{l}")
    return blocks


def transfer_level_R(state: Reconstruction, l: int) -> dict:
    """Column transfer blocks at target level ``l`` (``lm <= l < L``); fits ``B`` when ``l == lm``."""
    bf, cfg = state.bf, state.cfg
    L, lm, p = state.L, state.lm, cfg.oversample
    if not lm <= l < L:
        raise ValueError(f"R levels run from {L - 1} down to {lm}, got {l}")
    state.require("leafU", *([f"R{l + 1}"] if l < L - 1 else []))
    if l == lm:
        state.require("leafV", *(f"W{j}" for j in range(1, lm + 1)))
    if f"R{l}" in state.done:
        raise SequencingError(f"R level {l} already computed")
    ntau = 2**l
    center = l == lm

    def task(nu):
        pnu = nu // 2
        pairs = [(bf.rank_u(l + 1, 2 * tau, pnu), bf.rank_u(l + 1, 2 * tau + 1, pnu)) for tau in range(ntau)]
        rw = _probe_rank(state, pairs)
        if center:
            rw = max([rw] + [bf.rank_v(lm, tau, nu) for tau in range(ntau)])
        dtype = np.complex128 if state.complex else np.float64
        if rw == 0:
            Rs = [np.zeros((a + b, 0), dtype=dtype) for a, b in pairs]
            Bs = [np.zeros((0, bf.rank_v(lm, tau, nu)), dtype=dtype) for tau in range(ntau)] if center else None
            return Rs, Bs
        core = state.gaussian(bf.tree_s.node_size(L - l, nu), rw + p, PHASE_R, l, nu)
        Yt = state.product(StructuredProbe("source", bf.tree_s, L - l, nu, core), bf.tree_t)
        with state.tracker.hold(Yt):
            coef = u_project(bf, l + 1, pnu, Yt)
            Rs, Bs = [], [] if center else None
            vto = v_transpose_probe(bf, lm, nu, core) if center else None
            for tau in range(ntau):
                sample = np.concatenate([coef[2 * tau], coef[2 * tau + 1]])
                Rb = pivoted_qr_truncate(sample, cfg.eps, cfg.truncation)
                Rs.append(Rb)
                if center:
                    Bs.append(_fit_core(Rb.conj().T @ sample, vto[tau], cfg.literal_core))
            return Rs, Bs

    with state.phase(f"R{l}"):
        out = state.map(task, range(2 ** (L - l)))
    blocks = {}
    for nu, (Rs, Bs) in enumerate(out):
        for tau, Rb in enumerate(Rs):
            blocks[(l, tau, nu)] = Rb
        if center:
            for tau, Bb in enumerate(Bs):
                bf.B[(tau, nu)] = Bb
    bf.R.update(blocks)
    state.done.add(f"R{l}")
    if center:
        state.done.add("B")
    return blocks


def core_level(state: Reconstruction) -> dict:
    """Core blocks when the center level is the target leaf level (no R levels)."""
    bf, cfg = state.bf, state.cfg
    L, p = state.L, cfg.oversample
    if state.lm != L:
        raise SequencingError("core blocks are fitted by transfer_level_R unless lm == L")
    state.require("leafU", "leafV", *(f"W{j}" for j in range(1, L + 1)))
    with state.phase("B"):
        rw = max(bf.rank_v(L, tau, 0) for tau in range(2**L))
        dtype = np.complex128 if state.complex else np.float64
        if rw == 0:
            for tau in range(2**L):
                bf.B[(tau, 0)] = np.zeros((bf.U[tau].shape[1], 0), dtype=dtype)
        else:
            core = state.gaussian(bf.tree_s.n, rw + p, PHASE_CORE, L, 0)
            Yt = state.product(StructuredProbe("source", bf.tree_s, 0, 0, core), bf.tree_t)
            with state.tracker.hold(Yt):
                coef = u_project(bf, L, 0, Yt)
                vto = v_transpose_probe(bf, L, 0, core)
                for tau in range(2**L):
                    bf.B[(tau, 0)] = _fit_core(coef[tau], vto[tau], cfg.literal_core)
    state.done.add("B")
    return bf.B


def factorize(op, tree_t: PartitionTree, tree_s: PartitionTree, cfg: ReconstructionConfig | None = None):
    """Hybrid butterfly of ``op`` from black-box products; returns ``(bf, log)``."""
    cfg = cfg or ReconstructionConfig()
    t0 = time.perf_counter()
    f0, tr0 = op.cols_forward, op.cols_transpose
    state = Reconstruction(op, tree_t, tree_s, cfg)
    L, lm = state.L, state.lm
    leaf_row_bases(state)
    leaf_col_bases(state)
    for l in range(1, lm + 1):
        transfer_level_W(state, l)
    for l in range(L - 1, lm - 1, -1):
        transfer_level_R(state, l)
    if lm == L:
        core_level(state)
    log = state.log
    log.forward_cols = op.cols_forward - f0
    log.transpose_cols = op.cols_transpose - tr0
    log.peak_resident_probes = state.tracker.peak
    log.peak_probe_bytes = state.tracker.peak_bytes
    log.seconds = time.perf_counter() - t0
    state.bf.validate(orth_tol=1e-8)
    return state.bf, log


def predicted_transfer_cols(L: int, lm: int, r: int, p: int, rule: str = "child_sum") -> int:
    """Transfer-level probe columns for a constant-rank butterfly."""
    width = (2 * r if rule == "child_sum" else r) + p
    w_cols = sum(2**l for l in range(1, lm + 1))
    r_cols = sum(2 ** (L - l) for l in range(lm, L))
    extra = (r + p) if lm == L else 0
    return width * (w_cols + r_cols) + extra


# ----------------------------------------------------------------------------
# error checks


def estimate_error(op, bf: HybridButterfly, k: int = 16, seed: int = 0) -> float:
    """``||A Omega - K Omega||_F / ||A Omega||_F`` for a Gaussian ``n x k`` ``Omega``."""
    n = op.shape[1]
    omega = gaussian_matrix(n, k, (seed, PHASE_ERROR))
    ref = op.apply(omega)
    den = np.linalg.norm(ref)
    if den == 0.0:
        raise ZeroDivisionError("A Omega vanishes; the relative error is undefined")
    return float(np.linalg.norm(ref - bfm.apply(bf, omega)) / den)


def theorem_report(A: np.ndarray, bf: HybridButterfly, eps: float) -> list:
    """Summed block residuals against the per-level error bounds.

    Rows: column-basis levels ``L .. lm`` (side ``U``) with bound
    ``(L - l + 1) eps^2 ||K||^2``, row-basis levels ``0 .. lm`` (side ``V``)
    with bound ``(l + 1) eps^2 ||K||^2``, and two center-level rows with bound
    ``(L + 2) eps^2 ||K||^2``: side ``UV`` is the two-sided projection
    ``U U^H K_b conj(V) V^T`` and side ``UBV`` uses the fitted core blocks.
    """
    L, lm = bf.L, bf.lm
    tt, ts = bf.tree_t, bf.tree_s
    K = np.asarray(A)[np.ix_(tt.perm, ts.perm)]
    total = np.linalg.norm(K) ** 2

    def blocks(l):
        for tau in range(2**l):
            a, b = tt.node_range(l, tau)
            for nu in range(2 ** (L - l)):
                c, d = ts.node_range(L - l, nu)
                yield tau, nu, K[a:b, c:d]

    rows = []
    for l in range(L, lm - 1, -1):
        Ub = bfm.column_bases(bf, l)
        res = sum(np.linalg.norm(Kb - Ub[(t, v)] @ (Ub[(t, v)].conj().T @ Kb)) ** 2 for t, v, Kb in blocks(l))
        rows.append(("U", l, res, (L - l + 1) * eps**2 * total))
    for l in range(0, lm + 1):
        Vb = bfm.row_bases(bf, l)
        res = sum(np.linalg.norm(Kb - (Kb @ Vb[(t, v)].conj()) @ Vb[(t, v)].T) ** 2 for t, v, Kb in blocks(l))
        rows.append(("V", l, res, (l + 1) * eps**2 * total))
    Ub, Vb = bfm.column_bases(bf, lm), bfm.row_bases(bf, lm)
    res = sum(
        np.linalg.norm(Kb - Ub[(t, v)] @ (Ub[(t, v)].conj().T @ Kb @ Vb[(t, v)].conj()) @ Vb[(t, v)].T) ** 2
        for t, v, Kb in blocks(lm)
    )
    rows.append(("UV", lm, res, (L + 2) * eps**2 * total))
    res = sum(np.linalg.norm(Kb - Ub[(t, v)] @ bf.B[(t, v)] @ Vb[(t, v)].T) ** 2 for t, v, Kb in blocks(lm))
    rows.append(("UBV", lm, res, (L + 2) * eps**2 * total))
    return [
        {"side": s, "level": l, "residual_sq": float(r), "bound_sq": float(b), "pass": bool(r <= b)}
        for s, l, r, b in rows
    ]

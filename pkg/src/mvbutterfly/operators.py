"""Black-box operators with matvec counters, and the test-problem generators."""

from __future__ import annotations

import json
import math
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg

from . import butterfly as bfm
from .hier import PartitionTree, as_points, uniform_tree
from .linalg import gaussian_matrix, rng_for
from .special import h0_segment_self_integral, hankel_h0_second_kind

DENSE_N_CAP = 4096


class ConditioningError(RuntimeError):
    pass


class BlackBoxOperator:
    """An ``m x n`` operator reachable only through products with blocks of vectors.

    ``cols_forward`` / ``cols_transpose`` count the columns multiplied on each
    side; updates are guarded by a lock so concurrent callers see exact totals.
    ``points_t`` / ``points_s`` optionally carry the row / column geometry.
    """

    def __init__(
        self,
        shape: tuple[int, int],
        matmat: Callable[[np.ndarray], np.ndarray],
        rmatmat: Callable[[np.ndarray], np.ndarray],
        dtype=np.float64,
        points_t: np.ndarray | None = None,
        points_s: np.ndarray | None = None,
        name: str = "operator",
    ):
        self.shape = (int(shape[0]), int(shape[1]))
        self.dtype = np.dtype(dtype)
        self._matmat = matmat
        self._rmatmat = rmatmat
        self.points_t = points_t
        self.points_s = points_s
        self.name = name
        self.cols_forward = 0
        self.cols_transpose = 0
        self._lock = threading.Lock()

    def reset_counters(self):
        with self._lock:
            self.cols_forward = 0
            self.cols_transpose = 0

    def _run(self, X, rows, fn, attr):
        X = np.asarray(X)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != rows:
            raise ValueError(f"{self.name}: expected {rows} rows, got shape {X.shape}")
        out = fn(X)
        with self._lock:
            setattr(self, attr, getattr(self, attr) + X.shape[1])
        return out[:, 0] if vec else out

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self._run(X, self.shape[1], self._matmat, "cols_forward")

    def apply_transpose(self, Y: np.ndarray) -> np.ndarray:
        """Plain transpose product ``A^T Y``."""
        return self._run(Y, self.shape[0], self._rmatmat, "cols_transpose")

    def apply_adjoint(self, Y: np.ndarray) -> np.ndarray:
        return np.conj(self.apply_transpose(np.conj(Y)))

    def __repr__(self):
        return f"<{self.name} {self.shape[0]}x{self.shape[1]} {self.dtype}>"


def dense_operator(A: np.ndarray, name: str = "dense", **kw) -> BlackBoxOperator:
    A = np.asarray(A)
    return BlackBoxOperator(A.shape, lambda X: A @ X, lambda Y: A.T @ Y, A.dtype, name=name, **kw)


def butterfly_operator(bf: bfm.HybridButterfly, name: str = "butterfly") -> BlackBoxOperator:
    return BlackBoxOperator(
        bf.shape, lambda X: bfm.apply(bf, X), lambda Y: bfm.apply_transpose(bf, Y), bf.dtype, name=name
    )


def adjoint_mismatch(op: BlackBoxOperator, trials: int = 8, seed: int = 0) -> float:
    """Largest ``|y^T(Ax) - (A^T y)^T x| / (||y|| ||Ax||)`` over random pairs.

    Counters are restored afterwards so the probe does not pollute bookkeeping.
    """
    m, n = op.shape
    fwd, tr = op.cols_forward, op.cols_transpose
    rng = rng_for((seed, 77))
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(n)
        y = rng.standard_normal(m)
        Ax = op.apply(x)
        Aty = op.apply_transpose(y)
        scale = np.linalg.norm(y) * np.linalg.norm(Ax)
        if scale > 0:
            worst = max(worst, abs(y @ Ax - Aty @ x) / scale)
    with op._lock:
        op.cols_forward, op.cols_transpose = fwd, tr
    return worst


# ----------------------------------------------------------------------------
# synthetic exact butterflies


@dataclass(frozen=True)
class SyntheticButterflySpec:
    L: int
    r: int
    seed: int = 0

    def __post_init__(self):
        if self.L < 0:
            raise ValueError("L must be >= 0")
        if not 1 <= self.r <= 8:
            raise ValueError(f"rank {self.r} does not fit 8-row leaf blocks (need 1 <= r <= 8)")

    @property
    def n(self) -> int:
        return 2 ** (self.L + 3)


def _random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.sign(np.diag(R))


def synth_butterfly(spec: SyntheticButterflySpec) -> tuple[bfm.HybridButterfly, BlackBoxOperator]:
    """Random hybrid butterfly with every block rank ``r`` and 8-point leaves.

    Basis and transfer blocks have random orthonormal columns; core blocks are
    i.i.d. standard normal.
    """
    L, r = spec.L, spec.r
    n = spec.n
    lm = L // 2
    rng = rng_for((spec.seed, 31337))
    tree = uniform_tree(n, L)
    bf = bfm.HybridButterfly(tree, uniform_tree(n, L), lm)
    for tau in range(2**L):
        bf.U[tau] = _random_orthonormal(rng, 8, r)
    for l in range(L - 1, lm - 1, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                bf.R[(l, tau, nu)] = _random_orthonormal(rng, 2 * r, r)
    for tau in range(2**lm):
        for nu in range(2 ** (L - lm)):
            bf.B[(tau, nu)] = rng.standard_normal((r, r))
    for l in range(lm, 0, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                bf.W[(l, tau, nu)] = _random_orthonormal(rng, 2 * r, r)
    for nu in range(2**L):
        bf.V[nu] = _random_orthonormal(rng, 8, r)
    pts = (np.arange(n) + 0.5) / n
    op = butterfly_operator(bf, name=f"synthetic(L={L},r={r})")
    op.points_t = pts[:, None]
    op.points_s = pts[:, None]
    return bf, op


# ----------------------------------------------------------------------------
# 2D scattering matrix A = Z21 inv(Z11)


@dataclass(frozen=True)
class Scattering2DConfig:
    """Two parallel lines; ``n`` source segments on the first, ``m`` on the second.

    By default the wavelength is 1, segments are ``0.05`` wavelengths, the
    line length is ``n`` segments and the separation equals the length.
    """

    n: int
    m: int | None = None
    k0: float = 2 * math.pi
    segment: float | None = None
    length: float | None = None
    separation: float | None = None

    def __post_init__(self):
        if self.k0 <= 0:
            raise ValueError("wavenumber must be positive")
        if self.n < 1 or (self.m is not None and self.m < 1):
            raise ValueError("segment counts must be positive")

    @property
    def wavelength(self) -> float:
        return 2 * math.pi / self.k0

    def geometry(self) -> tuple[float, float, float]:
        """(line length, separation, source segment length)."""
        if self.length is not None:
            length = self.length
        else:
            h = self.segment if self.segment is not None else 0.05 * self.wavelength
            length = self.n * h
        sep = self.separation if self.separation is not None else length
        return length, sep, length / self.n


def scattering_points(cfg: Scattering2DConfig) -> tuple[np.ndarray, np.ndarray]:
    """Segment midpoints on the target line (C2) and source line (C1)."""
    length, sep, _ = cfg.geometry()
    m = cfg.m or cfg.n
    xs = (np.arange(cfg.n) + 0.5) * (length / cfg.n)
    xt = (np.arange(m) + 0.5) * (length / m)
    src = np.column_stack([xs, np.zeros_like(xs)])
    tgt = np.column_stack([xt, np.full_like(xt, sep)])
    return tgt, src


def scattering_blocks(cfg: Scattering2DConfig) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint-rule ``Z11`` (n x n) and ``Z21`` (m x n)."""
    _, _, h = cfg.geometry()
    tgt, src = scattering_points(cfg)
    d11 = np.linalg.norm(src[:, None, :] - src[None, :, :], axis=-1)
    np.fill_diagonal(d11, 1.0)
    Z11 = h * hankel_h0_second_kind(cfg.k0 * d11)
    np.fill_diagonal(Z11, h0_segment_self_integral(cfg.k0, h))
    d21 = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=-1)
    Z21 = h * hankel_h0_second_kind(cfg.k0 * d21)
    return Z11, Z21


def build_scattering_operator(cfg: Scattering2DConfig, cap: int = DENSE_N_CAP) -> BlackBoxOperator:
    """``A = Z21 inv(Z11)`` applied through a dense LU factorization of ``Z11``."""
    if cfg.n > cap:
        raise MemoryError(f"n = {cfg.n} exceeds the dense cap {cap}")
    Z11, Z21 = scattering_blocks(cfg)
    with warnings.catch_warnings():
        # singularity is reported below as a ConditioningError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(Z11, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < 1e-14 * np.linalg.norm(Z11):
        raise ConditioningError("Z11 is numerically singular")
    tgt, src = scattering_points(cfg)
    return BlackBoxOperator(
        Z21.shape,
        lambda X: Z21 @ scipy.linalg.lu_solve((lu, piv), X, check_finite=False),
        lambda Y: scipy.linalg.lu_solve((lu, piv), Z21.T @ Y, trans=1, check_finite=False),
        np.complex128,
        points_t=tgt,
        points_s=src,
        name=f"scattering2d(n={cfg.n})",
    )


# ----------------------------------------------------------------------------
# 3D Helmholtz kernel between two hemispheres


def kappa_for(n: int) -> float:
    """Wavenumber giving ``n = 50 kappa^2 / pi`` points per surface."""
    return math.sqrt(n * math.pi / 50.0)


def points_for(kappa: float) -> int:
    return math.ceil(50.0 * kappa**2 / math.pi)


@dataclass(frozen=True)
class Helmholtz3DConfig:
    n: int | None = None
    kappa: float | None = None
    seed: int = 0

    def resolved(self) -> tuple[int, float]:
        if self.n is None and self.kappa is None:
            raise ValueError("need n or kappa")
        n = self.n if self.n is not None else points_for(self.kappa)
        kappa = self.kappa if self.kappa is not None else kappa_for(n)
        if n < 4:
            raise ValueError("need at least 4 points per surface")
        return n, kappa


_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def semisphere_cloud(n: int, which: int, seed: int = 0) -> np.ndarray:
    """Fibonacci-lattice points on a unit hemisphere.

    Surface 1 is centred at the origin with its dome toward -x; surface 2 is
    centred at (2, 0, 0) with its dome toward +x, so the flat sides face each
    other. The seed only rotates the lattice about the symmetry axis.
    """
    if n < 4:
        raise ValueError("need at least 4 points")
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    offset = rng_for((seed, which, 4242)).uniform(0.0, 2 * math.pi)
    i = np.arange(n)
    height = (i + 0.5) / n
    radial = np.sqrt(1.0 - height**2)
    phi = offset + i * _GOLDEN_ANGLE
    axis = -1.0 if which == 1 else 1.0
    center = 0.0 if which == 1 else 2.0
    return np.column_stack([center + axis * height, radial * np.cos(phi), radial * np.sin(phi)])


def helmholtz3d_matrix(pt: np.ndarray, ps: np.ndarray, kappa: float) -> np.ndarray:
    d = np.linalg.norm(pt[:, None, :] - ps[None, :, :], axis=-1)
    if np.any(d == 0.0):
        raise ValueError("coincident target and source points")
    return np.exp(2j * math.pi * kappa * d) / d


def build_helmholtz3d_operator(cfg: Helmholtz3DConfig, cap: int = DENSE_N_CAP) -> BlackBoxOperator:
    n, kappa = cfg.resolved()
    if n > cap:
        raise MemoryError(f"n = {n} exceeds the dense cap {cap}")
    pt = semisphere_cloud(n, 1, cfg.seed)
    ps = semisphere_cloud(n, 2, cfg.seed)
    A = helmholtz3d_matrix(pt, ps, kappa)
    op = dense_operator(A, name=f"helmholtz3d(n={n},kappa={kappa:.4g})", points_t=pt, points_s=ps)
    op.dense = A
    return op


# ----------------------------------------------------------------------------
# config files


def load_operator_config(path) -> dict:
    return json.loads(Path(path).read_text())


def build_operator(cfg: dict, cap: int = DENSE_N_CAP):
    """Build ``(operator, ground_truth_butterfly_or_None)`` from a config mapping.

    Recognized ``type`` values: ``synthetic`` (L, r, seed), ``helmholtz3d``
    (n and/or kappa, seed), ``scattering2d`` (n, optional m, k0, segment,
    length, separation), ``dense`` (path to a ``.npy`` matrix) and
    ``container`` (path to a butterfly container used as the black box).
    """
    kind = cfg.get("type")
    cap = int(cfg.get("dense_cap", cap))
    need = {"synthetic": ("L", "r"), "scattering2d": ("n",), "dense": ("path",), "container": ("path",)}
    missing = [k for k in need.get(kind, ()) if k not in cfg]
    if missing:
        raise ValueError(f"{kind} operator config lacks {', '.join(missing)}")
    if kind == "synthetic":
        bf, op = synth_butterfly(SyntheticButterflySpec(int(cfg["L"]), int(cfg["r"]), int(cfg.get("seed", 0))))
        return op, bf
    if kind == "helmholtz3d":
        hc = Helmholtz3DConfig(cfg.get("n"), cfg.get("kappa"), int(cfg.get("seed", 0)))
        return build_helmholtz3d_operator(hc, cap), None
    if kind == "scattering2d":
        keys = ("n", "m", "k0", "segment", "length", "separation")
        sc = Scattering2DConfig(**{k: cfg[k] for k in keys if k in cfg})
        return build_scattering_operator(sc, cap), None
    if kind == "dense":
        A = np.load(cfg["path"])
        if max(A.shape) > cap:
            raise MemoryError(f"matrix of shape {A.shape} exceeds the dense cap {cap}")
        op = dense_operator(A)
        op.dense = A
        return op, None
    if kind == "container":
        bf = bfm.deserialize(cfg["path"])
        return butterfly_operator(bf), bf
    raise ValueError(f"unknown operator type {kind!r}")


def dense_of(op: BlackBoxOperator, cap: int = DENSE_N_CAP) -> np.ndarray:
    """Explicit matrix of an operator (cached dense array when available, else ``op @ I``).

    Does not advance the operator's counters.
    """
    A = getattr(op, "dense", None)
    if A is not None:
        return A
    m, n = op.shape
    if max(m, n) > cap:
        raise MemoryError(f"operator of shape {op.shape} exceeds the dense cap {cap}")
    return op._matmat(np.eye(n, dtype=op.dtype if op.dtype.kind == "c" else np.float64))


def random_probe(n: int, k: int, seed, complex_: bool = False) -> np.ndarray:
    return gaussian_matrix(n, k, seed, complex_)

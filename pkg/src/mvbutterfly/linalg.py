"""Dense kernels shared by the factorization code.

All routines accept real or complex double-precision numpy arrays (stored in
numpy's default row-major layout). Wherever a projection ``Q Q^T A`` appears
for real data, the complex case uses the Hermitian adjoint ``Q Q^H A``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
import scipy.linalg

Seed = Union[int, Sequence[int]]
MatFunc = Callable[[np.ndarray], np.ndarray]


class RankCapWarning(UserWarning):
    """Adaptive rank doubling hit its hard cap before converging."""


@dataclass(frozen=True)
class RangeFinderConfig:
    rank: int
    oversample: int = 2
    tol: float = 1e-6
    seed: Seed = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank guess must be >= 1, got {self.rank}")
        if self.oversample < 0:
            raise ValueError(f"oversampling must be >= 0, got {self.oversample}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tolerance must lie in (0, 1), got {self.tol}")


class AdaptiveResult(NamedTuple):
    basis: np.ndarray
    rounds: int
    last_rank_guess: int
    capped: bool

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def rng_for(seed: Seed) -> np.random.Generator:
    """Generator keyed by an int or a tuple of ints.

    Tuples go through ``SeedSequence`` so that streams such as
    ``(seed, phase, level, node)`` are independent of evaluation order.
    """
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


def gaussian_matrix(rows: int, cols: int, seed: Seed, complex_: bool = False) -> np.ndarray:
    """i.i.d. standard normal matrix; complex entries get N(0,1) real and imaginary parts."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs positive dims, got {rows}x{cols}")
    rng = rng_for(seed)
    if complex_:
        g = rng.standard_normal((rows, 2 * cols))
        return g[:, :cols] + 1j * g[:, cols:]
    return rng.standard_normal((rows, cols))


def orthonormality_error(Q: np.ndarray) -> float:
    """``||Q^H Q - I||_F``."""
    k = Q.shape[1]
    return float(np.linalg.norm(Q.conj().T @ Q - np.eye(k)))


def pivoted_qr_truncate(W: np.ndarray, tol: float, rule: str = "diag") -> np.ndarray:
    """Orthonormal basis for the numerical range of ``W``.

    Computes ``W P = Q R`` with column pivoting and keeps the leading ``k``
    columns of ``Q``. With ``rule="diag"``, ``k`` is the first index with
    ``|R[k, k]| <= tol * |R[0, 0]|`` (zero-based). With ``rule="tail"``, ``k``
    is the smallest index whose trailing block satisfies
    ``||R[k:, k:]||_F <= tol * |R[0, 0]|``; since ``||R[k:, k:]||_F`` is exactly
    ``||W - Q Q^H W||_F``, this bounds the whole discarded part rather than a
    single pivot. An all-zero ``W`` gives a basis with zero columns.
    """
    W = np.asarray(W)
    if W.ndim != 2:
        raise ValueError("pivoted_qr_truncate expects a 2-D array")
    m, n = W.shape
    dtype = np.result_type(W.dtype, np.float64)
    if m == 0 or n == 0:
        return np.zeros((m, 0), dtype=dtype)
    Q, R, _ = scipy.linalg.qr(W, mode="economic", pivoting=True, check_finite=False)
    d = np.abs(np.diag(R))
    if d[0] == 0.0:
        return np.zeros((m, 0), dtype=dtype)
    if rule == "diag":
        small = np.nonzero(d <= tol * d[0])[0]
    elif rule == "tail":
        tails = np.array([np.sum(np.abs(R[k:, k:]) ** 2) for k in range(d.size)])
        small = np.nonzero(tails <= (tol * d[0]) ** 2)[0]
    else:
        raise ValueError(f"unknown truncation rule {rule!r}")
    k = int(small[0]) if small.size else d.size
    return np.ascontiguousarray(Q[:, :k])


def _check_product(out: np.ndarray, cols: int, rows: int | None = None) -> np.ndarray:
    out = np.asarray(out)
    if out.ndim != 2 or out.shape[1] != cols or (rows is not None and out.shape[0] != rows):
        raise ValueError(
            f"operator callback returned shape {out.shape}, expected (*, {cols})"
            if rows is None
            else f"operator callback returned shape {out.shape}, expected ({rows}, {cols})"
        )
    return out


def randomized_range(apply_A: MatFunc, n: int, cfg: RangeFinderConfig) -> np.ndarray:
    """Randomized range finder: Gaussian sketch, then truncated pivoted QR.

    ``apply_A`` maps an ``n x k`` array to ``A @ X``. The returned basis has at
    most ``cfg.rank + cfg.oversample`` columns.
    """
    omega = gaussian_matrix(n, cfg.rank + cfg.oversample, cfg.seed)
    W = _check_product(apply_A(omega), omega.shape[1])
    return pivoted_qr_truncate(W, cfg.tol)


def adaptive_range(
    apply_A: MatFunc,
    n: int,
    r0: int,
    p: int,
    tol: float,
    seed: Seed = 0,
    cap: int | None = None,
) -> AdaptiveResult:
    """Rank-doubling wrapper around :func:`randomized_range`.

    Rounds use ``r = r0, 2 r0, 4 r0, ...`` and stop once ``r`` strictly
    exceeds the revealed rank, or once the revealed rank equals
    ``min(m, n)`` (no larger basis exists). ``cap`` (default ``min(m, n)``)
    bounds ``r``; hitting it without converging emits :class:`RankCapWarning`
    and returns the last basis with ``capped=True``.
    """
    if r0 < 1:
        raise ValueError(f"initial rank guess must be >= 1, got {r0}")
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    r = r0
    rounds = 0
    m = None
    while True:
        rounds += 1
        cfg = RangeFinderConfig(r, p, tol, base + (rounds,))
        omega = gaussian_matrix(n, r + p, cfg.seed)
        W = _check_product(apply_A(omega), r + p, m)
        m = W.shape[0]
        Q = pivoted_qr_truncate(W, tol)
        full = min(m, n)
        limit = full if cap is None else cap
        if r > Q.shape[1] or Q.shape[1] >= full:
            return AdaptiveResult(Q, rounds, r, False)
        if r >= limit:
            warnings.warn(
                f"adaptive range finder stopped at rank cap {limit} (revealed rank {Q.shape[1]})",
                RankCapWarning,
                stacklevel=2,
            )
            return AdaptiveResult(Q, rounds, r, True)
        r = min(2 * r, limit)


def pinv_solve(M: np.ndarray, tol: float = 1e-13) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with singular values below ``tol * s_max`` dropped."""
    M = np.asarray(M)
    if M.ndim != 2 or 0 in M.shape:
        raise ValueError(f"pinv_solve needs a nonempty 2-D array, got shape {M.shape}")
    U, s, Vh = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]), dtype=M.dtype)
    keep = s > tol * s[0]
    return (Vh[keep].conj().T / s[keep]) @ U[:, keep].conj().T


def fro(A: np.ndarray) -> float:
    return float(np.linalg.norm(A))


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spans of two orthonormal bases."""
    return scipy.linalg.subspace_angles(A, B)

"""Hybrid butterfly factorization: storage, fast products and a binary container.

A level-``lm`` hybrid factorization of an ``m x n`` matrix ``K`` is

    K ~ (U^L R^{L-1} ... R^{lm}) B^{lm} (W^{lm} ... W^1 V^0)

with blocks stored individually:

* ``U[tau]``            leaf column bases, ``|T_tau| x r``  (tau a leaf of the target tree)
* ``R[(l, tau, nu)]``   transfer blocks, ``(r_{tau1,p_nu} + r_{tau2,p_nu}) x r_{tau,nu}``,
                        ``lm <= l < L``
* ``B[(tau, nu)]``      core blocks at level ``lm``
* ``W[(l, tau, nu)]``   transfer blocks, ``(r_{p_tau,nu1} + r_{p_tau,nu2}) x r_{tau,nu}``,
                        ``1 <= l <= lm``
* ``V[nu]``             leaf row bases, ``|S_nu| x r`` (nu a leaf of the source tree)

Level ``l`` always refers to the target tree; the matching source node sits
at level ``L - l``. Row bases enter through plain transposes
(``K_b ~ U B V^T``), so the V side is exactly a column-wise factorization of
``K^T``. All blocks act on tree-ordered indices; :func:`apply` and friends
permute at the boundary.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse

from .hier import PartitionTree

DENSE_CAP = 4096 * 4096

MAGIC = b"HBFY"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIQQQ")
_SECTION = struct.Struct("<4sQ")
_SCALARS = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


class ButterflyFormatError(ValueError):
    """Malformed or truncated container."""


@dataclass(eq=False)
class HybridButterfly:
    tree_t: PartitionTree
    tree_s: PartitionTree
    lm: int
    U: dict = field(default_factory=dict)
    R: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)
    W: dict = field(default_factory=dict)
    V: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tree_t.L != self.tree_s.L:
            raise ValueError("target and source trees must have the same depth")
        if not 0 <= self.lm <= self.L:
            raise ValueError(f"center level {self.lm} outside [0, {self.L}]")

    @property
    def L(self) -> int:
        return self.tree_t.L

    @property
    def shape(self) -> tuple[int, int]:
        return self.tree_t.n, self.tree_s.n

    @property
    def dtype(self) -> np.dtype:
        blocks = [b for d in (self.U, self.R, self.B, self.W, self.V) for b in d.values()]
        if any(np.iscomplexobj(b) for b in blocks):
            return np.dtype(np.complex128)
        return np.dtype(np.float64)

    # ranks -----------------------------------------------------------------
    def rank_u(self, l: int, tau: int, nu: int) -> int:
        """Rank of the column basis ``U_{tau,nu}`` (tau at level ``l``)."""
        if l == self.L:
            return self.U[tau].shape[1]
        return self.R[(l, tau, nu)].shape[1]

    def rank_v(self, l: int, tau: int, nu: int) -> int:
        """Rank of the row basis ``V_{tau,nu}`` (tau at level ``l``)."""
        if l == 0:
            return self.V[nu].shape[1]
        return self.W[(l, tau, nu)].shape[1]

    def rank_profile(self) -> dict:
        """``(side, level, tau, nu) -> rank`` for every basis in the chain."""
        L, lm = self.L, self.lm
        prof = {}
        for l in range(L, lm - 1, -1):
            for tau in range(2**l):
                for nu in range(2 ** (L - l)):
                    prof[("U", l, tau, nu)] = self.rank_u(l, tau, nu)
        for l in range(0, lm + 1):
            for tau in range(2**l):
                for nu in range(2 ** (L - l)):
                    prof[("V", l, tau, nu)] = self.rank_v(l, tau, nu)
        return prof

    def max_rank(self) -> int:
        return max(self.rank_profile().values(), default=0)

    # iteration ---------------------------------------------------------------
    def blocks(self):
        """Yield ``(name, key, array)`` in the fixed chain order U, R, B, W, V."""
        L, lm = self.L, self.lm
        for tau in range(2**L):
            yield "U", (tau,), self.U[tau]
        for l in range(L - 1, lm - 1, -1):
            for tau in range(2**l):
                for nu in range(2 ** (L - l)):
                    yield "R", (l, tau, nu), self.R[(l, tau, nu)]
        for tau in range(2**lm):
            for nu in range(2 ** (L - lm)):
                yield "B", (tau, nu), self.B[(tau, nu)]
        for l in range(lm, 0, -1):
            for tau in range(2**l):
                for nu in range(2 ** (L - l)):
                    yield "W", (l, tau, nu), self.W[(l, tau, nu)]
        for nu in range(2**L):
            yield "V", (nu,), self.V[nu]

    def validate(self, orth_tol: float | None = 1e-10):
        """Check block presence, dimension chaining and (optionally) orthonormality."""
        L, lm = self.L, self.lm
        try:
            for tau in range(2**L):
                if self.U[tau].shape[0] != self.tree_t.node_size(L, tau):
                    raise ValueError(f"U[{tau}] has {self.U[tau].shape[0]} rows")
            for nu in range(2**L):
                if self.V[nu].shape[0] != self.tree_s.node_size(L, nu):
                    raise ValueError(f"V[{nu}] has {self.V[nu].shape[0]} rows")
            for l in range(L - 1, lm - 1, -1):
                for tau in range(2**l):
                    for nu in range(2 ** (L - l)):
                        want = self.rank_u(l + 1, 2 * tau, nu // 2) + self.rank_u(l + 1, 2 * tau + 1, nu // 2)
                        if self.R[(l, tau, nu)].shape[0] != want:
                            raise ValueError(f"R{(l, tau, nu)} has {self.R[(l, tau, nu)].shape[0]} rows, want {want}")
            for l in range(1, lm + 1):
                for tau in range(2**l):
                    for nu in range(2 ** (L - l)):
                        want = self.rank_v(l - 1, tau // 2, 2 * nu) + self.rank_v(l - 1, tau // 2, 2 * nu + 1)
                        if self.W[(l, tau, nu)].shape[0] != want:
                            raise ValueError(f"W{(l, tau, nu)} has {self.W[(l, tau, nu)].shape[0]} rows, want {want}")
            for tau in range(2**lm):
                for nu in range(2 ** (L - lm)):
                    want = (self.rank_u(lm, tau, nu), self.rank_v(lm, tau, nu))
                    if self.B[(tau, nu)].shape != want:
                        raise ValueError(f"B{(tau, nu)} has shape {self.B[(tau, nu)].shape}, want {want}")
        except KeyError as exc:
            raise ValueError(f"missing block {exc}") from None
        if orth_tol is not None:
            for name, key, blk in self.blocks():
                if name == "B" or blk.shape[1] == 0:
                    continue
                k = blk.shape[1]
                err = np.linalg.norm(blk.conj().T @ blk - np.eye(k))
                if err > orth_tol * max(1.0, np.sqrt(k)):
                    raise ValueError(f"{name}{key} is not orthonormal (error {err:.2e})")


# ----------------------------------------------------------------------------
# fast products


def _as_block(X: np.ndarray, rows: int, what: str) -> tuple[np.ndarray, bool]:
    X = np.asarray(X)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != rows:
        raise ValueError(f"{what}: expected {rows} rows, got shape {X.shape}")
    return X, vec


def _v_side_up(bf: HybridButterfly, Xt: np.ndarray, counter=None) -> list:
    """Blocks ``V_{tau,nu}^T X[S_nu]`` at level ``lm``, tau-major order."""
    L, lm, ts = bf.L, bf.lm, bf.tree_s
    k = Xt.shape[1]
    y = []
    for nu in range(2**L):
        a, b = ts.node_range(L, nu)
        V = bf.V[nu]
        y.append(V.T @ Xt[a:b])
        _count(counter, V.size * k)
    for l in range(1, lm + 1):
        nq = 2 ** (L - l)
        nxt = []
        for tau in range(2**l):
            base = (tau // 2) * 2 * nq
            for nu in range(nq):
                W = bf.W[(l, tau, nu)]
                stacked = np.concatenate([y[base + 2 * nu], y[base + 2 * nu + 1]])
                nxt.append(W.T @ stacked)
                _count(counter, W.size * k)
        y = nxt
    return y


def _u_side_down(bf: HybridButterfly, z: list, counter=None) -> np.ndarray:
    """Expand level-``lm`` coefficients (tau-major) through R and U to tree-ordered rows."""
    L, lm, tt = bf.L, bf.lm, bf.tree_t
    k = z[0].shape[1] if z else 0
    for l in range(lm, L):
        nq = 2 ** (L - l)
        nxt = [None] * (2 ** (l + 1) * (nq // 2))
        for tau in range(2**l):
            for nu in range(nq):
                R = bf.R[(l, tau, nu)]
                w = R @ z[tau * nq + nu]
                _count(counter, R.size * k)
                r1 = bf.rank_u(l + 1, 2 * tau, nu // 2)
                for child, part in ((2 * tau, w[:r1]), (2 * tau + 1, w[r1:])):
                    idx = child * (nq // 2) + nu // 2
                    nxt[idx] = part if nxt[idx] is None else nxt[idx] + part
        z = nxt
    m = tt.n
    out = np.zeros((m, k), dtype=np.result_type(bf.dtype, *(zz.dtype for zz in z)))
    for tau in range(2**L):
        a, b = tt.node_range(L, tau)
        U = bf.U[tau]
        out[a:b] = U @ z[tau]
        _count(counter, U.size * k)
    return out


def _count(counter, flops):
    if counter is not None:
        counter["flops"] = counter.get("flops", 0) + int(flops)


def apply(bf: HybridButterfly, X: np.ndarray, counter: dict | None = None) -> np.ndarray:
    """``K @ X`` through the factor chain (right to left).

    ``counter``, if given, accumulates the multiply-add count under ``"flops"``.
    """
    m, n = bf.shape
    X, vec = _as_block(X, n, "apply")
    Xt = X[bf.tree_s.perm]
    y = _v_side_up(bf, Xt, counter)
    L, lm = bf.L, bf.lm
    k = X.shape[1]
    z = []
    for tau in range(2**lm):
        for nu in range(2 ** (L - lm)):
            Bb = bf.B[(tau, nu)]
            z.append(Bb @ y[tau * 2 ** (L - lm) + nu])
            _count(counter, Bb.size * k)
    out_t = _u_side_down(bf, z, counter)
    out = np.empty_like(out_t)
    out[bf.tree_t.perm] = out_t
    return out[:, 0] if vec else out


def apply_transpose(bf: HybridButterfly, Y: np.ndarray, counter: dict | None = None) -> np.ndarray:
    """``K^T @ Y`` (plain transpose, no conjugation)."""
    m, n = bf.shape
    Y, vec = _as_block(Y, m, "apply_transpose")
    L, lm = bf.L, bf.lm
    k = Y.shape[1]
    Yt = Y[bf.tree_t.perm]
    tt, ts = bf.tree_t, bf.tree_s
    z = []
    for tau in range(2**L):
        a, b = tt.node_range(L, tau)
        z.append(bf.U[tau].T @ Yt[a:b])
        _count(counter, bf.U[tau].size * k)
    for l in range(L - 1, lm - 1, -1):
        nq = 2 ** (L - l)
        nxt = []
        for tau in range(2**l):
            for nu in range(nq):
                R = bf.R[(l, tau, nu)]
                stacked = np.concatenate([z[(2 * tau) * (nq // 2) + nu // 2], z[(2 * tau + 1) * (nq // 2) + nu // 2]])
                nxt.append(R.T @ stacked)
                _count(counter, R.size * k)
        z = nxt
    nq = 2 ** (L - lm)
    y = []
    for tau in range(2**lm):
        for nu in range(nq):
            Bb = bf.B[(tau, nu)]
            y.append(Bb.T @ z[tau * nq + nu])
            _count(counter, Bb.size * k)
    for l in range(lm, 0, -1):
        nq = 2 ** (L - l)
        prev = [None] * (2 ** (l - 1) * nq * 2)
        for tau in range(2**l):
            base = (tau // 2) * 2 * nq
            for nu in range(nq):
                W = bf.W[(l, tau, nu)]
                w = W @ y[tau * nq + nu]
                _count(counter, W.size * k)
                r1 = bf.rank_v(l - 1, tau // 2, 2 * nu)
                for idx, part in ((base + 2 * nu, w[:r1]), (base + 2 * nu + 1, w[r1:])):
                    prev[idx] = part if prev[idx] is None else prev[idx] + part
        y = prev
    out_t = np.zeros((n, k), dtype=np.result_type(bf.dtype, Y.dtype))
    for nu in range(2**L):
        a, b = ts.node_range(L, nu)
        out_t[a:b] = bf.V[nu] @ y[nu]
        _count(counter, bf.V[nu].size * k)
    out = np.empty_like(out_t)
    out[ts.perm] = out_t
    return out[:, 0] if vec else out


def apply_adjoint(bf: HybridButterfly, Y: np.ndarray) -> np.ndarray:
    """``K^H @ Y``."""
    return np.conj(apply_transpose(bf, np.conj(Y)))


def to_dense(bf: HybridButterfly, cap: int = DENSE_CAP) -> np.ndarray:
    m, n = bf.shape
    if m * n > cap:
        raise MemoryError(f"refusing to densify a {m}x{n} butterfly (cap {cap} entries)")
    return apply(bf, np.eye(n))


# ----------------------------------------------------------------------------
# nested bases and assembled factors


def column_bases(bf: HybridButterfly, level: int) -> dict:
    """Explicit ``U_{tau,nu}`` for every block at ``level`` (``lm <= level <= L``), tree-ordered rows."""
    L = bf.L
    if not bf.lm <= level <= L:
        raise ValueError(f"column bases exist for levels {bf.lm}..{L}")
    cur = {(tau, 0): bf.U[tau] for tau in range(2**L)}
    for l in range(L - 1, level - 1, -1):
        nxt = {}
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                R = bf.R[(l, tau, nu)]
                U1, U2 = cur[(2 * tau, nu // 2)], cur[(2 * tau + 1, nu // 2)]
                r1 = U1.shape[1]
                nxt[(tau, nu)] = np.concatenate([U1 @ R[:r1], U2 @ R[r1:]])
        cur = nxt
    return cur


def row_bases(bf: HybridButterfly, level: int) -> dict:
    """Explicit ``V_{tau,nu}`` for every block at ``level`` (``0 <= level <= lm``), tree-ordered rows."""
    L = bf.L
    if not 0 <= level <= bf.lm:
        raise ValueError(f"row bases exist for levels 0..{bf.lm}")
    cur = {(0, nu): bf.V[nu] for nu in range(2**L)}
    for l in range(1, level + 1):
        nxt = {}
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                W = bf.W[(l, tau, nu)]
                V1, V2 = cur[(tau // 2, 2 * nu)], cur[(tau // 2, 2 * nu + 1)]
                r1 = V1.shape[1]
                nxt[(tau, nu)] = np.concatenate([V1 @ W[:r1], V2 @ W[r1:]])
        cur = nxt
    return cur


def _offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def assembled_factors(bf: HybridButterfly) -> list:
    """Sparse factors ``[U^L, R^{L-1}, ..., R^{lm}, B^{lm}, W^{lm}, ..., W^1, V^0]``.

    Their product is the tree-ordered matrix ``K[perm_t][:, perm_s]``.
    U-side intermediate spaces are ordered source-node-major, so each R
    factor is block diagonal with the interleaved two-column-group layout
    of the column-wise construction; V-side spaces are target-node-major.
    """
    L, lm = bf.L, bf.lm
    m, n = bf.shape
    dtype = bf.dtype
    factors = []

    def u_space(l):
        nq = 2 ** (L - l)
        keys = [(tau, nu) for nu in range(nq) for tau in range(2**l)]
        return keys, _offsets([bf.rank_u(l, t, v) for t, v in keys])

    def v_space(l):
        nq = 2 ** (L - l)
        keys = [(tau, nu) for tau in range(2**l) for nu in range(nq)]
        return keys, _offsets([bf.rank_v(l, t, v) for t, v in keys])

    keys, off = u_space(L)
    Um = scipy.sparse.lil_matrix((m, off[-1]), dtype=dtype)
    for i, (tau, _) in enumerate(keys):
        a, b = bf.tree_t.node_range(L, tau)
        Um[a:b, off[i] : off[i + 1]] = bf.U[tau]
    factors.append(Um.tocsr())
    for l in range(L - 1, lm - 1, -1):
        out_keys, out_off = u_space(l + 1)
        in_keys, in_off = u_space(l)
        pos_out = {k: i for i, k in enumerate(out_keys)}
        F = scipy.sparse.lil_matrix((out_off[-1], in_off[-1]), dtype=dtype)
        for j, (tau, nu) in enumerate(in_keys):
            R = bf.R[(l, tau, nu)]
            i1 = pos_out[(2 * tau, nu // 2)]
            i2 = pos_out[(2 * tau + 1, nu // 2)]
            r1 = out_off[i1 + 1] - out_off[i1]
            F[out_off[i1] : out_off[i1 + 1], in_off[j] : in_off[j + 1]] = R[:r1]
            F[out_off[i2] : out_off[i2 + 1], in_off[j] : in_off[j + 1]] = R[r1:]
        factors.append(F.tocsr())
    out_keys, out_off = u_space(lm)
    in_keys, in_off = v_space(lm)
    pos_in = {k: i for i, k in enumerate(in_keys)}
    F = scipy.sparse.lil_matrix((out_off[-1], in_off[-1]), dtype=dtype)
    for i, key in enumerate(out_keys):
        j = pos_in[key]
        F[out_off[i] : out_off[i + 1], in_off[j] : in_off[j + 1]] = bf.B[key]
    factors.append(F.tocsr())
    for l in range(lm, 0, -1):
        out_keys, out_off = v_space(l)
        in_keys, in_off = v_space(l - 1)
        pos_in = {k: i for i, k in enumerate(in_keys)}
        F = scipy.sparse.lil_matrix((out_off[-1], in_off[-1]), dtype=dtype)
        for i, (tau, nu) in enumerate(out_keys):
            W = bf.W[(l, tau, nu)]
            j1 = pos_in[(tau // 2, 2 * nu)]
            j2 = pos_in[(tau // 2, 2 * nu + 1)]
            r1 = in_off[j1 + 1] - in_off[j1]
            F[out_off[i] : out_off[i + 1], in_off[j1] : in_off[j1 + 1]] = W[:r1].T
            F[out_off[i] : out_off[i + 1], in_off[j2] : in_off[j2 + 1]] = W[r1:].T
        factors.append(F.tocsr())
    keys, off = v_space(0)
    Vm = scipy.sparse.lil_matrix((off[-1], n), dtype=dtype)
    for i, (_, nu) in enumerate(keys):
        a, b = bf.tree_s.node_range(L, nu)
        Vm[off[i] : off[i + 1], a:b] = bf.V[nu].T
    factors.append(Vm.tocsr())
    return factors


# ----------------------------------------------------------------------------
# accounting


def memory_report(bf: HybridButterfly) -> dict:
    """Stored entry counts.

    ``bytes`` is ``nnz * itemsize`` plus 16 bytes of shape metadata per block
    and 8 bytes per permutation entry.
    """
    per = {}
    nblocks = 0
    for name, key, blk in bf.blocks():
        label = name if name in ("U", "B", "V") else f"{name}{key[0]}"
        per[label] = per.get(label, 0) + blk.size
        nblocks += 1
    nnz = sum(per.values())
    m, n = bf.shape
    return {
        "nnz": nnz,
        "bytes": nnz * bf.dtype.itemsize + 16 * nblocks + 8 * (m + n),
        "blocks": nblocks,
        "per_factor": per,
    }


def summary(bf: HybridButterfly) -> dict:
    mem = memory_report(bf)
    m, n = bf.shape
    return {
        "L": bf.L,
        "lm": bf.lm,
        "m": m,
        "n": n,
        "scalar": "complex" if bf.dtype.kind == "c" else "real",
        "max_rank": bf.max_rank(),
        "nnz": mem["nnz"],
        "bytes": mem["bytes"],
    }


# ----------------------------------------------------------------------------
# container format
#
# header: magic "HBFY", u16 version, u8 scalar tag (0 real, 1 complex), u8 pad,
#         u32 L, u32 lm, u64 m, u64 n, u64 nnz
# then sections, each "TAG" + u64 payload length:
#   TREE  target perm (m x u64), target leaf bounds, source perm, source bounds
#   RANK  u32 block shapes (rows, cols) in chain order
#   BLKS  block entries, row-major, little-endian, chain order


def _chain_keys(L: int, lm: int):
    for tau in range(2**L):
        yield "U", tau
    for l in range(L - 1, lm - 1, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                yield "R", (l, tau, nu)
    for tau in range(2**lm):
        for nu in range(2 ** (L - lm)):
            yield "B", (tau, nu)
    for l in range(lm, 0, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                yield "W", (l, tau, nu)
    for nu in range(2**L):
        yield "V", nu


def to_bytes(bf: HybridButterfly) -> bytes:
    m, n = bf.shape
    tag = 1 if bf.dtype.kind == "c" else 0
    dt = _SCALARS[tag]
    shapes = []
    data = []
    for _, _, blk in bf.blocks():
        shapes.append(blk.shape)
        data.append(np.ascontiguousarray(blk, dtype=dt).tobytes())
    nnz = sum(r * c for r, c in shapes)
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, VERSION, tag, 0, bf.L, bf.lm, m, n, nnz))
    tree = b"".join(
        np.asarray(a, dtype="<u8").tobytes()
        for a in (bf.tree_t.perm, bf.tree_t.bounds, bf.tree_s.perm, bf.tree_s.bounds)
    )
    rank = np.asarray(shapes, dtype="<u4").reshape(-1).tobytes()
    blks = b"".join(data)
    for name, payload in ((b"TREE", tree), (b"RANK", rank), (b"BLKS", blks)):
        out.write(_SECTION.pack(name, len(payload)))
        out.write(payload)
    return out.getvalue()


def serialize(bf: HybridButterfly, sink) -> None:
    """Write the container to a path or a binary file object."""
    payload = to_bytes(bf)
    if hasattr(sink, "write"):
        sink.write(payload)
    else:
        Path(sink).write_bytes(payload)


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_bytes()


def _parse_header(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise ButterflyFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes at offset 0")
    magic, version, tag, _, L, lm, m, n, nnz = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ButterflyFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise ButterflyFormatError(f"unsupported version {version} at offset 4")
    if tag not in _SCALARS:
        raise ButterflyFormatError(f"unknown scalar tag {tag} at offset 6")
    return {"L": L, "lm": lm, "m": m, "n": n, "nnz": nnz, "scalar": "complex" if tag else "real", "tag": tag}


def inspect_header(source) -> dict:
    """Header fields (L, lm, m, n, nnz, scalar) without decoding any block."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return _parse_header(fh.read(_HEADER.size))
    return _parse_header(_read_source(source)[: _HEADER.size])


def deserialize(source) -> HybridButterfly:
    buf = _read_source(source)
    hdr = _parse_header(buf)
    off = _HEADER.size
    sections = {}
    for want in (b"TREE", b"RANK", b"BLKS"):
        name = want.decode()
        if off + _SECTION.size > len(buf):
            raise ButterflyFormatError(f"missing section {name} at offset {off}")
        tag, length = _SECTION.unpack_from(buf, off)
        if tag != want:
            raise ButterflyFormatError(f"expected section {name}, found {tag!r} at offset {off}")
        off += _SECTION.size
        if off + length > len(buf):
            raise ButterflyFormatError(
                f"section {name} truncated at offset {off}: need {length} bytes, have {len(buf) - off}"
            )
        sections[name] = (buf[off : off + length], off)
        off += length
    L, lm, m, n = hdr["L"], hdr["lm"], hdr["m"], hdr["n"]
    nleaf = 2**L + 1
    tree = np.frombuffer(sections["TREE"][0], dtype="<u8").astype(np.int64)
    if tree.size != m + n + 2 * nleaf:
        raise ButterflyFormatError(f"section TREE has {tree.size} entries at offset {sections['TREE'][1]}")
    pt, bt = tree[:m], tree[m : m + nleaf]
    ps, bs = tree[m + nleaf : m + nleaf + n], tree[m + nleaf + n :]
    tree_t, tree_s = PartitionTree(pt, bt, L), PartitionTree(ps, bs, L)
    shapes = np.frombuffer(sections["RANK"][0], dtype="<u4").reshape(-1, 2)
    keys = list(_chain_keys(L, lm))
    if len(keys) != shapes.shape[0]:
        raise ButterflyFormatError(f"section RANK lists {shapes.shape[0]} blocks, expected {len(keys)}")
    dt = _SCALARS[hdr["tag"]]
    raw, boff = sections["BLKS"]
    if len(raw) != int((shapes[:, 0].astype(np.int64) * shapes[:, 1]).sum()) * dt.itemsize:
        raise ButterflyFormatError(f"section BLKS size mismatch at offset {boff}")
    bf = HybridButterfly(tree_t, tree_s, lm)
    pos = 0
    for (name, key), (r, c) in zip(keys, shapes):
        cnt = int(r) * int(c)
        blk = np.frombuffer(raw, dtype=dt, count=cnt, offset=pos * dt.itemsize).reshape(int(r), int(c))
        pos += cnt
        getattr(bf, name)[key] = blk.astype(dt.newbyteorder("="))
    return bf

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvbutterfly import butterfly as bfm
from mvbutterfly.butterfly import ButterflyFormatError, HybridButterfly
from mvbutterfly.hier import uniform_tree
from mvbutterfly.operators import SyntheticButterflySpec, synth_butterfly


def synth(L, r, seed=0):
    return synth_butterfly(SyntheticButterflySpec(L, r, seed))[0]


def zero_rank(L, n):
    t = uniform_tree(n, L)
    bf = HybridButterfly(t, uniform_tree(n, L), L // 2)
    for tau in range(2**L):
        bf.U[tau] = np.zeros((t.node_size(L, tau), 0))
        bf.V[tau] = np.zeros((t.node_size(L, tau), 0))
    for l in range(L - 1, bf.lm - 1, -1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                bf.R[(l, tau, nu)] = np.zeros((0, 0))
    for l in range(1, bf.lm + 1):
        for tau in range(2**l):
            for nu in range(2 ** (L - l)):
                bf.W[(l, tau, nu)] = np.zeros((0, 0))
    for tau in range(2**bf.lm):
        for nu in range(2 ** (L - bf.lm)):
            bf.B[(tau, nu)] = np.zeros((0, 0))
    return bf


def permuted(bf, seed=0):
    """Same blocks, shuffled point orderings on both sides."""
    rng = np.random.default_rng(seed)
    tt = bf.tree_t.__class__(rng.permutation(bf.shape[0]), bf.tree_t.bounds, bf.L)
    ts = bf.tree_s.__class__(rng.permutation(bf.shape[1]), bf.tree_s.bounds, bf.L)
    return HybridButterfly(tt, ts, bf.lm, bf.U, bf.R, bf.B, bf.W, bf.V)


def test_apply_zero():
    bf = synth(3, 2)
    assert not np.any(bfm.apply(bf, np.zeros((64, 3))))
    assert not np.any(bfm.apply_transpose(bf, np.zeros((64, 3))))


def test_one_level_identity():
    bf = synth(1, 3)
    np.testing.assert_array_equal(bfm.apply(bf, np.eye(16)), bfm.to_dense(bf))


@pytest.mark.parametrize("L", [0, 1, 2, 3, 4, 5])
def test_apply_matches_dense(L):
    bf = permuted(synth(L, 3, seed=L), seed=L)
    K = bfm.to_dense(bf)
    X = np.random.default_rng(1).standard_normal((bf.shape[1], 5))
    Y = np.random.default_rng(2).standard_normal((bf.shape[0], 5))
    ref = K @ X
    assert np.linalg.norm(bfm.apply(bf, X) - ref) <= 1e-12 * np.linalg.norm(ref)
    reft = K.T @ Y
    assert np.linalg.norm(bfm.apply_transpose(bf, Y) - reft) <= 1e-12 * np.linalg.norm(reft)


def test_dense_oracle_from_factors():
    # independent oracle: product of the assembled sparse factors
    bf = permuted(synth(4, 2, seed=3), seed=5)
    prod = None
    for F in bfm.assembled_factors(bf):
        prod = F.toarray() if prod is None else prod @ F.toarray()
    K = np.empty_like(prod)
    K[np.ix_(bf.tree_t.perm, bf.tree_s.perm)] = prod
    X = np.random.default_rng(0).standard_normal((128, 4))
    assert np.linalg.norm(bfm.apply(bf, X) - K @ X) <= 1e-12 * np.linalg.norm(K @ X)


def test_transpose_identity():
    bf = synth(3, 2, seed=1)
    np.testing.assert_allclose(bfm.apply_transpose(bf, np.eye(64)).T, bfm.to_dense(bf), atol=1e-12)


def test_columns_of_dense():
    bf = synth(3, 4, seed=2)
    K = bfm.to_dense(bf)
    for j in range(64):
        e = np.zeros(64)
        e[j] = 1.0
        np.testing.assert_allclose(bfm.apply(bf, e), K[:, j], atol=1e-13)


def test_complex_adjoint():
    bf = synth(3, 2, seed=4)
    rng = np.random.default_rng(0)
    for key in list(bf.B):
        bf.B[key] = bf.B[key] * np.exp(1j * rng.uniform(0, 2 * np.pi, bf.B[key].shape))
    K = bfm.to_dense(bf)
    Y = rng.standard_normal((64, 2)) + 1j * rng.standard_normal((64, 2))
    np.testing.assert_allclose(bfm.apply_adjoint(bf, Y), K.conj().T @ Y, atol=1e-12)
    np.testing.assert_allclose(bfm.apply_transpose(bf, Y), K.T @ Y, atol=1e-12)


def test_dim_mismatch():
    bf = synth(2, 2)
    with pytest.raises(ValueError):
        bfm.apply(bf, np.zeros((31, 1)))
    with pytest.raises(ValueError):
        bfm.apply_transpose(bf, np.zeros((33, 1)))


def test_to_dense_cap():
    with pytest.raises(MemoryError):
        bfm.to_dense(synth(3, 2), cap=100)


def test_zero_rank_profile():
    bf = zero_rank(3, 40)
    bf.validate()
    assert not np.any(bfm.to_dense(bf))
    assert bfm.memory_report(bf)["nnz"] == 0
    assert bf.max_rank() == 0


def nnz_closed_form(L, r):
    lm = L // 2
    leaves = 2 * 2**L * 8 * r
    transfer = 2**L * 2 * r * r * ((L - lm) + lm)
    core = 2**L * r * r
    return leaves + transfer + core


@pytest.mark.parametrize("L,r", [(2, 1), (3, 2), (4, 4), (5, 8), (6, 3)])
def test_nnz_closed_form(L, r):
    rep = bfm.memory_report(synth(L, r))
    assert rep["nnz"] == nnz_closed_form(L, r)
    assert rep["nnz"] == sum(rep["per_factor"].values())


def test_nnz_doubling():
    for L in range(6, 11):
        assert nnz_closed_form(L + 1, 4) / nnz_closed_form(L, 4) <= 2.4
    for L in range(6, 9):
        assert bfm.memory_report(synth(L + 1, 4))["nnz"] / bfm.memory_report(synth(L, 4))["nnz"] <= 2.4


def test_flops_scale_like_n_log_n():
    ns, flops = [], []
    for L in range(4, 11):
        bf = synth(L, 4)
        counter = {}
        bfm.apply(bf, np.ones(bf.shape[1]), counter)
        assert counter["flops"] == bfm.memory_report(bf)["nnz"]
        ns.append(bf.shape[1])
        flops.append(counter["flops"] / math.log(bf.shape[1]))
    slope = np.polyfit(np.log(ns), np.log(flops), 1)[0]
    assert 0.95 <= slope <= 1.15


def test_validate_catches_bad_chaining():
    bf = synth(3, 2)
    bf.R[(2, 0, 0)] = bf.R[(2, 0, 0)][:-1]
    with pytest.raises(ValueError):
        bf.validate(orth_tol=None)
    bf = synth(3, 2)
    bf.W[(1, 0, 0)] = 2 * bf.W[(1, 0, 0)]
    with pytest.raises(ValueError, match="orthonormal"):
        bf.validate()
    bf = synth(3, 2)
    del bf.B[(0, 0)]
    with pytest.raises(ValueError, match="missing"):
        bf.validate()


def test_rank_profile_matches_blocks():
    bf = synth(4, 3)
    prof = bf.rank_profile()
    assert set(prof.values()) == {3}
    assert len(prof) == sum(2**4 for _ in range(4, 1, -1)) + sum(2**4 for _ in range(0, 3))


def test_bases_are_orthonormal_and_reproduce_blocks():
    bf = synth(4, 2, seed=7)
    K = bfm.to_dense(bf)
    tt, ts = bf.tree_t, bf.tree_s
    for l in range(bf.lm, bf.L + 1):
        for (tau, nu), U in bfm.column_bases(bf, l).items():
            np.testing.assert_allclose(U.T @ U, np.eye(U.shape[1]), atol=1e-12)
            a, b = tt.node_range(l, tau)
            c, d = ts.node_range(bf.L - l, nu)
            Kb = K[a:b, c:d]
            np.testing.assert_allclose(U @ (U.T @ Kb), Kb, atol=1e-12)
    for l in range(0, bf.lm + 1):
        for (tau, nu), V in bfm.row_bases(bf, l).items():
            a, b = tt.node_range(l, tau)
            c, d = ts.node_range(bf.L - l, nu)
            Kb = K[a:b, c:d]
            np.testing.assert_allclose((Kb @ V) @ V.T, Kb, atol=1e-12)
    with pytest.raises(ValueError):
        bfm.column_bases(bf, bf.lm - 1)
    with pytest.raises(ValueError):
        bfm.row_bases(bf, bf.lm + 1)


# ----------------------------------------------------------------------------
# container


def test_round_trip_bit_exact(tmp_path):
    bf = permuted(synth(4, 3, seed=1), seed=2)
    raw = bfm.to_bytes(bf)
    path = tmp_path / "bf.hbf"
    bfm.serialize(bf, path)
    back = bfm.deserialize(path)
    assert bfm.to_bytes(back) == raw
    np.testing.assert_array_equal(bfm.to_dense(back), bfm.to_dense(bf))
    buf = io.BytesIO()
    bfm.serialize(bf, buf)
    assert buf.getvalue() == raw
    assert bfm.to_bytes(bfm.deserialize(io.BytesIO(raw))) == raw


def test_round_trip_complex():
    bf = synth(2, 2)
    bf.B[(0, 0)] = bf.B[(0, 0)] * 1j
    back = bfm.deserialize(bfm.to_bytes(bf))
    assert back.dtype == np.complex128
    assert bfm.to_bytes(back) == bfm.to_bytes(bf)


def test_header_inspection(tmp_path):
    bf = synth(5, 2)
    path = tmp_path / "x.hbf"
    bfm.serialize(bf, path)
    hdr = bfm.inspect_header(path)
    mem = bfm.memory_report(bf)
    assert (hdr["L"], hdr["m"], hdr["n"], hdr["nnz"]) == (5, 256, 256, mem["nnz"])
    assert hdr == bfm.inspect_header(path.read_bytes())


def test_truncated_stream_names_section():
    raw = bfm.to_bytes(synth(3, 2))
    with pytest.raises(ButterflyFormatError, match="header"):
        bfm.deserialize(raw[:10])
    with pytest.raises(ButterflyFormatError, match="BLKS"):
        bfm.deserialize(raw[:-8])
    with pytest.raises(ButterflyFormatError, match="offset"):
        bfm.deserialize(raw[:-8])
    hdr = bfm._HEADER.size
    with pytest.raises(ButterflyFormatError, match="TREE"):
        bfm.deserialize(raw[: hdr + 4])


def test_bad_magic_and_version():
    raw = bytearray(bfm.to_bytes(synth(2, 1)))
    bad = bytes(b"XXXX" + raw[4:])
    with pytest.raises(ButterflyFormatError, match="magic"):
        bfm.deserialize(bad)
    raw[4] = 99
    with pytest.raises(ButterflyFormatError, match="version"):
        bfm.deserialize(bytes(raw))


def test_summary_fields():
    s = bfm.summary(synth(4, 2))
    assert s["L"] == 4 and s["lm"] == 2 and s["m"] == s["n"] == 128 and s["max_rank"] == 2


@settings(max_examples=20, deadline=None)
@given(L=st.integers(0, 5), r=st.integers(1, 8), seed=st.integers(0, 1000))
def test_random_butterflies(L, r, seed):
    bf = synth(L, r, seed)
    raw = bfm.to_bytes(bf)
    back = bfm.deserialize(raw)
    X = np.random.default_rng(seed).standard_normal((bf.shape[1], 2))
    np.testing.assert_array_equal(bfm.apply(back, X), bfm.apply(bf, X))
    K = bfm.to_dense(bf)
    assert np.linalg.norm(bfm.apply(bf, X) - K @ X) <= 1e-12 * np.linalg.norm(K @ X)
    factors = bfm.assembled_factors(bf)
    for left, right in zip(factors, factors[1:]):
        assert left.shape[1] == right.shape[0]

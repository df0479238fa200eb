import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvbutterfly import butterfly as bfm
from mvbutterfly.hier import build_tree, uniform_tree
from mvbutterfly.linalg import RankCapWarning
from mvbutterfly.operators import (
    Helmholtz3DConfig,
    Scattering2DConfig,
    SyntheticButterflySpec,
    build_helmholtz3d_operator,
    build_scattering_operator,
    dense_of,
    dense_operator,
    synth_butterfly,
)
from mvbutterfly.reconstruct import (
    Reconstruction,
    ReconstructionConfig,
    SequencingError,
    StructuredProbe,
    core_block,
    core_blocks,
    core_level,
    estimate_error,
    factorize,
    leaf_col_bases,
    leaf_row_bases,
    predicted_transfer_cols,
    probe_with,
    theorem_report,
    transfer_level_R,
    transfer_level_W,
)


def synth(L, r, seed=0):
    return synth_butterfly(SyntheticButterflySpec(L, r, seed))


def state_for(op, tree_t, tree_s, **kw):
    return Reconstruction(op, tree_t, tree_s, ReconstructionConfig(**kw))


def helmholtz(n):
    op = build_helmholtz3d_operator(Helmholtz3DConfig(n=n))
    return op


def geometric_trees(op, L):
    return build_tree(op.points_t, L), build_tree(op.points_s, L)


# config


@pytest.mark.parametrize(
    "kw",
    [dict(eps=0.0), dict(eps=1.0), dict(oversample=-1), dict(r0=0), dict(cap=0), dict(transfer_rank="x"), dict(truncation="x"), dict(threads=0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ReconstructionConfig(**kw)


def test_center_level():
    assert ReconstructionConfig().center_level(7) == 3
    assert ReconstructionConfig(lm=7).center_level(7) == 7
    with pytest.raises(ValueError):
        ReconstructionConfig(lm=8).center_level(7)
    with pytest.raises(ValueError):
        ReconstructionConfig(L=5).center_level(6)


# structured probes


def test_probe_zero_core():
    A = np.random.default_rng(0).standard_normal((16, 16))
    t = uniform_tree(16, 2)
    out = probe_with(dense_operator(A), StructuredProbe("source", t, 2, 1, np.zeros((4, 3))))
    assert out.shape == (16, 3) and not np.any(out)


def test_probe_root_is_plain_apply():
    A = np.random.default_rng(1).standard_normal((12, 16))
    t = build_tree(np.random.default_rng(2).standard_normal(16), 2)
    core = np.random.default_rng(3).standard_normal((16, 2))
    probe = StructuredProbe("source", t, 0, 0, core)
    np.testing.assert_allclose(probe_with(dense_operator(A), probe), A[:, t.perm] @ core)


def test_probe_leaf_matches_slice():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((20, 16))
    t = build_tree(rng.standard_normal((16, 2)), 2)
    core = rng.standard_normal((4, 3))
    op = dense_operator(A)
    out = probe_with(op, StructuredProbe("source", t, 2, 3, core))
    np.testing.assert_allclose(out, A[:, t.indices(2, 3)] @ core)
    assert op.cols_forward == 3
    tt = uniform_tree(20, 2)
    core = rng.standard_normal((5, 2))
    out = probe_with(op, StructuredProbe("target", tt, 2, 1, core))
    np.testing.assert_allclose(out, A[tt.indices(2, 1)].T @ core)
    assert op.cols_transpose == 2


def test_probe_rejects_mismatch():
    t = uniform_tree(16, 2)
    with pytest.raises(ValueError):
        StructuredProbe("source", t, 2, 0, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        StructuredProbe("left", t, 2, 0, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        probe_with(dense_operator(np.zeros((8, 8))), StructuredProbe("source", t, 0, 0, np.zeros((16, 1))))


# leaf phases


@pytest.mark.parametrize("side", ["V", "U"])
def test_leaf_phase_exact_rank(side):
    bf, op = synth(5, 8, seed=2)
    st_ = state_for(op, bf.tree_t, bf.tree_s, eps=1e-10, r0=4, oversample=2)
    before = op.cols_transpose if side == "V" else op.cols_forward
    blocks = (leaf_row_bases if side == "V" else leaf_col_bases)(st_)
    after = op.cols_transpose if side == "V" else op.cols_forward
    widths = st_.log.leaf_widths_v if side == "V" else st_.log.leaf_widths_u
    assert len(widths) == 2
    assert after - before == sum(widths) == (4 + 2) + (8 + 2)
    assert all(b.shape[1] == 8 for b in blocks.values())


@pytest.mark.parametrize("side", ["V", "U"])
def test_leaf_phase_zero_operator(side):
    t = uniform_tree(64, 3)
    op = dense_operator(np.zeros((64, 64)))
    st_ = state_for(op, t, t)
    blocks = (leaf_row_bases if side == "V" else leaf_col_bases)(st_)
    widths = st_.log.leaf_widths_v if side == "V" else st_.log.leaf_widths_u
    assert len(widths) == 1
    assert all(b.shape[1] == 0 for b in blocks.values())


def test_leaf_phase_rank_cap_warns():
    A = np.random.default_rng(0).standard_normal((64, 64))
    t = uniform_tree(64, 1)
    st_ = state_for(dense_operator(A), t, t, r0=2, cap=8, eps=1e-12)
    with pytest.warns(RankCapWarning):
        leaf_row_bases(st_)
    assert st_.log.capped_v
    assert st_.log.leaf_widths_v == [4, 6, 10]


def test_leaf_rounds_stop_on_strict_inequality():
    # exact rank 4 leaves: r = 4 reveals 4, so one more doubling is needed
    bf, op = synth(4, 4, seed=1)
    st_ = state_for(op, bf.tree_t, bf.tree_s, eps=1e-10, r0=4, oversample=2)
    leaf_row_bases(st_)
    assert st_.log.leaf_widths_v == [6, 10]


# transfer levels


def prepared(L=4, r=3, seed=0, **kw):
    bf, op = synth(L, r, seed)
    kw.setdefault("eps", 1e-10)
    st_ = state_for(op, bf.tree_t, bf.tree_s, **kw)
    leaf_row_bases(st_)
    leaf_col_bases(st_)
    return bf, op, st_


def test_transfer_W_exact_ranks_and_residuals():
    truth, op, st_ = prepared(L=6, r=3)
    K = bfm.to_dense(truth)
    for l in range(1, st_.lm + 1):
        f0 = op.cols_transpose
        blocks = transfer_level_W(st_, l)
        assert op.cols_transpose - f0 == 2**l * (2 * 3 + 2)
        assert all(b.shape[1] == 3 for b in blocks.values())
    for l in range(st_.lm + 1):
        for (tau, nu), V in bfm.row_bases(st_.bf, l).items():
            a, b = truth.tree_t.node_range(l, tau)
            c, d = truth.tree_s.node_range(6 - l, nu)
            Kb = K[a:b, c:d]
            assert np.linalg.norm(Kb - Kb @ V @ V.T) <= 1e-10 * np.linalg.norm(Kb)


def test_transfer_R_exact_ranks_single_probe_per_node():
    truth, op, st_ = prepared(L=6, r=3)
    for l in range(1, st_.lm + 1):
        transfer_level_W(st_, l)
    for l in range(5, st_.lm - 1, -1):
        f0 = op.cols_forward
        blocks = transfer_level_R(st_, l)
        assert op.cols_forward - f0 == 2 ** (6 - l) * (2 * 3 + 2)
        assert all(b.shape[1] == 3 for b in blocks.values())
    assert "B" in st_.done
    assert estimate_error(op, st_.bf) <= 1e-10


def test_transfer_sequencing():
    _, _, st_ = prepared(L=4, r=2)
    with pytest.raises(SequencingError):
        transfer_level_W(st_, 2)
    with pytest.raises(SequencingError):
        transfer_level_R(st_, 2)
    transfer_level_R(st_, 3)
    with pytest.raises(SequencingError):
        transfer_level_R(st_, 3)
    # the center level needs the whole V side
    with pytest.raises(SequencingError):
        transfer_level_R(st_, 2)
    with pytest.raises(ValueError):
        transfer_level_R(st_, 4)
    with pytest.raises(ValueError):
        transfer_level_W(st_, 0)
    with pytest.raises(SequencingError):
        core_level(st_)


def test_transfer_before_leaves():
    bf, op = synth(4, 2)
    st_ = state_for(op, bf.tree_t, bf.tree_s)
    with pytest.raises(SequencingError):
        transfer_level_W(st_, 1)
    with pytest.raises(SequencingError):
        transfer_level_R(st_, 3)


def test_rank_zero_children_skip_black_box():
    t = uniform_tree(64, 4)
    op = dense_operator(np.zeros((64, 64)))
    st_ = state_for(op, t, t)
    leaf_row_bases(st_)
    leaf_col_bases(st_)
    f0, t0 = op.cols_forward, op.cols_transpose
    for l in (1, 2):
        blocks = transfer_level_W(st_, l)
        assert all(b.shape[1] == 0 for b in blocks.values())
    for l in (3, 2):
        transfer_level_R(st_, l)
    assert (op.cols_forward, op.cols_transpose) == (f0, t0)
    assert not np.any(bfm.to_dense(st_.bf))


# core blocks


def test_core_block_exact():
    rng = np.random.default_rng(0)
    U, _ = np.linalg.qr(rng.standard_normal((20, 4)))
    V, _ = np.linalg.qr(rng.standard_normal((16, 3)))
    Bbar = rng.standard_normal((4, 3))
    K = U @ Bbar @ V.T
    Om = rng.standard_normal((16, 5))
    np.testing.assert_allclose(core_block(U, K @ Om, V.T @ Om), Bbar, atol=1e-10)


def test_core_block_square_unitary_identity_probe():
    rng = np.random.default_rng(1)
    U, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    V, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    K = rng.standard_normal((6, 6))
    np.testing.assert_allclose(core_block(U, K, V.T), U.T @ K @ V, atol=1e-12)


def test_core_block_is_least_squares_minimizer():
    rng = np.random.default_rng(2)
    U, _ = np.linalg.qr(rng.standard_normal((12, 3)))
    V, _ = np.linalg.qr(rng.standard_normal((10, 4)))
    KOm = rng.standard_normal((12, 7))
    VtOm = V.T @ rng.standard_normal((10, 7))
    B = core_block(U, KOm, VtOm)
    best = np.linalg.norm(KOm - U @ B @ VtOm)
    for _ in range(20):
        P = B + 1e-3 * rng.standard_normal(B.shape)
        assert best <= np.linalg.norm(KOm - U @ P @ VtOm) + 1e-10


def test_core_block_underdetermined():
    with pytest.raises(ValueError, match="wider probe"):
        core_block(np.eye(3), np.zeros((3, 2)), np.zeros((4, 2)))


def test_core_blocks_dict():
    rng = np.random.default_rng(3)
    U = {k: np.linalg.qr(rng.standard_normal((5, 2)))[0] for k in range(3)}
    VtOm = {k: rng.standard_normal((2, 4)) for k in range(3)}
    KOm = {k: U[k] @ VtOm[k] for k in range(3)}
    for k, B in core_blocks(KOm, U, VtOm).items():
        np.testing.assert_allclose(B, np.eye(2), atol=1e-12)


def test_core_level_when_center_is_leaf_level():
    bf, op = synth(3, 2, seed=5)
    cfg = ReconstructionConfig(eps=1e-10, lm=3)
    out, log = factorize(op, bf.tree_t, bf.tree_s, cfg)
    assert out.lm == 3
    assert estimate_error(op, out) <= 1e-10


# full factorization


def test_exact_recovery_l6_r8():
    bf, op = synth(6, 8, seed=0)
    out, log = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10, r0=4, oversample=2))
    assert estimate_error(op, out) <= 1e-10
    assert out.max_rank() == 8
    out.validate(orth_tol=1e-10)


@pytest.mark.parametrize("lm", [0, 1, 2, 3, 4])
def test_exact_recovery_any_center(lm):
    bf, op = synth(4, 3, seed=lm)
    out, _ = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10, lm=lm))
    assert out.lm == lm
    assert estimate_error(op, out) <= 1e-10


@pytest.mark.parametrize("L", [2, 3, 4, 5, 6])
def test_matvec_count_identity(L):
    r, p = 4, 2
    bf, op = synth(L, r, seed=1)
    out, log = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10, r0=r, oversample=p))
    assert log.total_cols == predicted_transfer_cols(L, L // 2, r, p) + log.leaf_cols
    assert log.total_cols == op.cols_forward + op.cols_transpose
    assert sum(v["forward_cols"] + v["transpose_cols"] for v in log.phases.values()) == log.total_cols
    bf, op = synth(L, r, seed=1)
    cfg = ReconstructionConfig(eps=1e-10, r0=r, oversample=p, transfer_rank="max_child")
    out, log = factorize(op, bf.tree_t, bf.tree_s, cfg)
    assert log.total_cols == predicted_transfer_cols(L, L // 2, r, p, "max_child") + log.leaf_cols
    assert estimate_error(op, out) <= 1e-10


def test_one_probe_resident_at_a_time():
    bf, op = synth(5, 4)
    _, log = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10, threads=1))
    assert log.peak_resident_probes == 1
    assert 0 < log.peak_probe_bytes <= 256 * (2 * 4 + 2) * 8 * 2


def test_deterministic_bytes_and_threads():
    bf, op = synth(5, 4, seed=3)
    cfg = ReconstructionConfig(eps=1e-10, seed=11)
    a, la = factorize(op, bf.tree_t, bf.tree_s, cfg)
    b, lb = factorize(op, bf.tree_t, bf.tree_s, cfg)
    c, _ = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10, seed=11, threads=4))
    assert bfm.to_bytes(a) == bfm.to_bytes(b) == bfm.to_bytes(c)
    assert la.to_json(timings=False) == lb.to_json(timings=False)


def test_shape_mismatch():
    op = dense_operator(np.zeros((10, 12)))
    with pytest.raises(ValueError):
        factorize(op, uniform_tree(10, 1), uniform_tree(10, 1))


def test_rectangular_complex_operator():
    op = build_scattering_operator(Scattering2DConfig(128, m=96))
    tt, ts = geometric_trees(op, 3)
    out, log = factorize(op, tt, ts, ReconstructionConfig(eps=1e-6))
    assert out.shape == (96, 128)
    assert out.dtype == np.complex128
    A = dense_of(op)
    err = np.linalg.norm(bfm.to_dense(out) - A) / np.linalg.norm(A)
    assert err <= np.sqrt(5) * 1e-6 * 4


def test_literal_core_flag_changes_fit():
    op = helmholtz(256)
    tt, ts = geometric_trees(op, 4)
    a, _ = factorize(op, tt, ts, ReconstructionConfig(eps=1e-3))
    b, _ = factorize(op, tt, ts, ReconstructionConfig(eps=1e-3, literal_core=True))
    assert estimate_error(op, a) < estimate_error(op, b)


def test_monotone_in_eps():
    op = helmholtz(512)
    tt, ts = geometric_trees(op, 4)
    floor = 1e-4
    errs = {}
    for eps in (1e-2, 5e-3):
        errs[eps] = np.median(
            [estimate_error(op, factorize(op, tt, ts, ReconstructionConfig(eps=eps, seed=s))[0], seed=s) for s in range(5)]
        )
    assert errs[5e-3] <= errs[1e-2] + floor


# error estimate and bound report


def test_estimate_error_zero_factorization():
    t = uniform_tree(64, 3)
    zero_op = dense_operator(np.zeros((64, 64)))
    zero_bf, _ = factorize(zero_op, t, t)
    _, op = synth(3, 2)
    assert estimate_error(op, zero_bf) == 1.0
    with pytest.raises(ZeroDivisionError):
        estimate_error(zero_op, zero_bf)


def test_theorem_report_exact():
    bf, op = synth(4, 2)
    out, _ = factorize(op, bf.tree_t, bf.tree_s, ReconstructionConfig(eps=1e-10))
    rows = theorem_report(bfm.to_dense(bf), out, 1e-10)
    assert all(r["pass"] for r in rows)
    assert max(r["residual_sq"] for r in rows) <= 1e-20 * np.linalg.norm(bfm.to_dense(bf)) ** 2
    sides = [r["side"] for r in rows]
    assert sides.count("U") == 3 and sides.count("V") == 3 and "UV" in sides and "UBV" in sides


def test_theorem_report_helmholtz_and_tightness():
    op = helmholtz(512)
    tt, ts = geometric_trees(op, 4)
    eps = 1e-3
    out, _ = factorize(op, tt, ts, ReconstructionConfig(eps=eps))
    A = dense_of(op)
    assert all(r["pass"] for r in theorem_report(A, out, eps))
    assert not all(r["pass"] for r in theorem_report(A, out, eps / 100))


@settings(max_examples=12, deadline=None)
@given(L=st.integers(1, 5), r=st.integers(1, 8), seed=st.integers(0, 1000), r0=st.integers(1, 9), p=st.integers(0, 3))
def test_exact_recovery_property(L, r, seed, r0, p):
    bf, op = synth(L, r, seed)
    cfg = ReconstructionConfig(eps=1e-11, r0=r0, oversample=p, seed=seed)
    out, log = factorize(op, bf.tree_t, bf.tree_s, cfg)
    assert log.total_cols == op.cols_forward + op.cols_transpose
    assert log.peak_resident_probes == 1
    assert estimate_error(op, out, seed=seed) <= 1e-9

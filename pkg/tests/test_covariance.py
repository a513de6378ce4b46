import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from betasplat.covariance import (CovFactors, batched_blocks, build_l, covariance_blocks,
                                  invert_query_block, parameter_count, rotation_first_order)

finite = st.floats(-3.0, 3.0, allow_nan=False)


def random_factors(rng, c):
    return CovFactors(rot_params=rng.uniform(-1, 1, 3),
                      s_x=rng.uniform(0.2, 2.0, 3),
                      l_qx=rng.uniform(-1, 1, (c, 3)),
                      s_q=rng.uniform(0.2, 2.0, c))


def test_rotation_identity_at_zero():
    assert np.array_equal(rotation_first_order(np.zeros(3)), np.eye(3))


@given(finite, finite, finite)
def test_rotation_skew_symmetry(a1, a2, a3):
    r = rotation_first_order(np.array([a1, a2, a3]))
    a = r - np.eye(3)
    assert np.abs(a + a.T).max() == 0.0


def test_rotation_determinant_formula(rng):
    # det(I + A) = 1 + |a|^2, checked against the dense determinant
    a = np.array([0.1, 0.2, 0.3])
    r = rotation_first_order(a)
    assert np.linalg.det(r) == pytest.approx(1.14, rel=1e-12)
    for _ in range(50):
        a = rng.uniform(-2, 2, 3)
        assert np.linalg.det(rotation_first_order(a)) == pytest.approx(
            1.0 + a @ a, rel=1e-10)


def test_rotation_generator_layout():
    r = rotation_first_order(np.array([1.0, 2.0, 3.0]))
    a = r - np.eye(3)
    assert a[0, 1] == -3.0 and a[0, 2] == 2.0 and a[1, 2] == -1.0


def test_build_l_identity():
    f = CovFactors(np.zeros(3), np.ones(3), np.zeros((3, 3)), np.ones(3))
    assert np.array_equal(build_l(f), np.eye(6))


def test_build_l_reduces_to_3d():
    f = CovFactors(np.array([0.2, -0.1, 0.4]), np.array([1.0, 2.0, 0.5]),
                   np.zeros((0, 3)), np.zeros(0))
    l = build_l(f)
    assert l.shape == (3, 3)
    assert np.array_equal(l, rotation_first_order(f.rot_params) * f.s_x)


def test_build_l_block_pattern(rng):
    for c in (3, 4):
        f = random_factors(rng, c)
        l = build_l(f)
        assert np.array_equal(l[:3, 3:], np.zeros((3, c)))
        off_diag = l[3:, 3:] - np.diag(np.diag(l[3:, 3:]))
        assert np.array_equal(off_diag, np.zeros((c, c)))
        assert np.array_equal(l[3:, :3], f.l_qx)


def test_build_l_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        CovFactors(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros((3, 3)), np.ones(3))


def test_blocks_identity():
    f = CovFactors(np.zeros(3), np.ones(3), np.zeros((3, 3)), np.ones(3))
    b = covariance_blocks(f)
    assert np.allclose(b.sigma_x, np.eye(3))
    assert np.array_equal(b.sigma_xq, np.zeros((3, 3)))
    assert np.allclose(b.sigma_q, np.eye(3))


def test_blocks_no_cross_coupling(rng):
    f = random_factors(rng, 3)
    f.l_qx[:] = 0.0
    assert np.array_equal(covariance_blocks(f).sigma_xq, np.zeros((3, 3)))


def test_blocks_match_dense_product(rng):
    # block assembly must equal the dense L L^T entrywise
    for c in (0, 3, 4):
        for _ in range(25):
            f = random_factors(rng, c)
            l = build_l(f)
            sigma = l @ l.T
            b = covariance_blocks(f)
            assert np.abs(b.sigma_x - sigma[:3, :3]).max() <= 1e-12
            if c:
                assert np.abs(b.sigma_xq - sigma[:3, 3:]).max() <= 1e-12
                assert np.abs(b.sigma_q - sigma[3:, 3:]).max() <= 1e-12


def test_full_covariance_symmetric_psd(rng):
    for _ in range(40):
        f = random_factors(rng, 4)
        l = build_l(f)
        sigma = l @ l.T
        assert np.abs(sigma - sigma.T).max() <= 1e-12
        assert np.linalg.eigvalsh(sigma).min() >= -1e-10


def test_diagonal_case_exact():
    s = np.array([0.5, 1.5, 2.5])
    f = CovFactors(np.zeros(3), s, np.zeros((0, 3)), np.zeros(0))
    assert np.array_equal(covariance_blocks(f).sigma_x, np.diag(s ** 2))


def test_batched_blocks_agree_with_single(rng):
    n, c = 17, 4
    rot = rng.uniform(-1, 1, (n, 3))
    s_x = rng.uniform(0.2, 2.0, (n, 3))
    l_qx = rng.uniform(-1, 1, (n, c, 3))
    s_q = rng.uniform(0.2, 2.0, (n, c))
    sx, sxq, sq, _ = batched_blocks(rot, s_x, l_qx, s_q)
    for i in range(n):
        b = covariance_blocks(CovFactors(rot[i], s_x[i], l_qx[i], s_q[i]))
        assert np.abs(sx[i] - b.sigma_x).max() <= 1e-12
        assert np.abs(sxq[i] - b.sigma_xq).max() <= 1e-12
        assert np.abs(sq[i] - b.sigma_q).max() <= 1e-12


def test_invert_query_block_jitter_and_degenerate():
    good = np.eye(3)[None] * 2.0
    inv, bad = invert_query_block(good)
    assert not bad.any()
    assert np.allclose(inv[0], np.eye(3) / 2.0)
    # singular but fixable by jitter
    nearly = np.diag([1.0, 1.0, 0.0])[None]
    inv, bad = invert_query_block(nearly)
    assert not bad[0]
    # hopeless: negative definite stays degenerate
    hopeless = (-np.eye(3))[None]
    _, bad = invert_query_block(hopeless)
    assert bad[0]


def test_parameter_count_totals():
    assert parameter_count(6)["total"] == 35
    assert parameter_count(7)["total"] == 44
    assert parameter_count(6)["covariance"] == 21
    assert parameter_count(7)["covariance"] == 28
    assert parameter_count(3)["total"] == 14
    with pytest.raises(ValueError):
        parameter_count(5)

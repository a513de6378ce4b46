import numpy as np
import pytest

from betasplat.config import RenderSettings
from betasplat.covariance import CovBlocks, CovFactors, build_l, covariance_blocks
from betasplat.scene import Primitive, Scene, logit
from betasplat.slicing import (DegeneratePrimitiveError, Query, conditional_cov,
                               conditional_mean, opacity_gate, slice_primitive, slice_scene)
from betasplat.testing import random_query, random_scene


def dense_gaussian_condition(factors: CovFactors, mu_x, mu_q, q):
    """Textbook conditional of a joint normal, built from the dense N x N
    covariance with generic solves; independent of the block path."""
    l = build_l(factors)
    sigma = l @ l.T
    sp, spd, sd = sigma[:3, :3], sigma[:3, 3:], sigma[3:, 3:]
    mean = np.asarray(mu_x) + spd @ np.linalg.solve(sd, np.asarray(q) - np.asarray(mu_q))
    cov = sp - spd @ np.linalg.solve(sd, spd.T)
    return mean, cov


def random_setup(rng, c=3):
    factors = CovFactors(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.3, 1.5, 3),
                         rng.uniform(-0.6, 0.6, (c, 3)), rng.uniform(0.5, 1.5, c))
    mu_x = rng.uniform(-1, 1, 3)
    mu_q = rng.uniform(0, 1, c)
    return factors, mu_x, mu_q


class TestQuery:
    def test_lengths(self):
        assert Query.static().dims.shape == (0,)
        assert Query.view([2.0, 0.0, 0.0]).dims.shape == (3,)
        assert Query.view_time(0.5, [0, 0, 1]).dims.shape == (4,)

    def test_direction_normalized(self):
        q = Query.view([3.0, 4.0, 0.0])
        assert np.linalg.norm(q.dims) == pytest.approx(1.0, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Query(np.array([0.5, 0.5, 0.5]))  # non-unit direction
        with pytest.raises(ValueError):
            Query.view_time(1.5, [0, 0, 1.0])
        with pytest.raises(ValueError):
            Query(np.array([0.1, 0.2]))


class TestConditionalMean:
    def test_query_at_mean_is_identity(self, rng):
        factors, mu_x, mu_q = random_setup(rng)
        blocks = covariance_blocks(factors)
        # query equal to mu_q (may not be unit; bypass validation)
        q = Query.__new__(Query)
        q.dims = mu_q
        out = conditional_mean(blocks, mu_x, mu_q, rng.uniform(0.5, 2.0, 3), q)
        assert np.abs(out - mu_x).max() < 1e-14

    def test_zero_cross_block(self, rng):
        factors, mu_x, mu_q = random_setup(rng)
        factors.l_qx[:] = 0.0
        blocks = covariance_blocks(factors)
        q = random_query(6, 3)
        out = conditional_mean(blocks, mu_x, mu_q, rng.uniform(0.5, 2.0, 3), q)
        assert np.abs(out - mu_x).max() < 1e-14

    def test_matches_gaussian_oracle_at_unit_weights(self, rng):
        for _ in range(30):
            factors, mu_x, mu_q = random_setup(rng)
            blocks = covariance_blocks(factors)
            q = random_query(6, int(rng.integers(1000)))
            mine = conditional_mean(blocks, mu_x, mu_q, np.ones(3), q)
            oracle, _ = dense_gaussian_condition(factors, mu_x, mu_q, q.dims)
            assert np.abs(mine - oracle).max() <= 1e-10

    def test_degenerate_raises(self):
        blocks = CovBlocks(np.eye(3), np.zeros((3, 3)), -np.eye(3))
        with pytest.raises(DegeneratePrimitiveError):
            conditional_mean(blocks, np.zeros(3), np.zeros(3), np.ones(3),
                             Query.view([1, 0, 0]))


class TestConditionalCov:
    def test_zero_cross_block_returns_sigma_x(self, rng):
        factors, _, _ = random_setup(rng)
        factors.l_qx[:] = 0.0
        blocks = covariance_blocks(factors)
        out = conditional_cov(blocks, rng.uniform(0.5, 2.0, 3))
        assert np.abs(out - blocks.sigma_x).max() < 1e-14

    def test_matches_schur_complement_at_unit_weights(self, rng):
        for _ in range(30):
            factors, mu_x, mu_q = random_setup(rng)
            blocks = covariance_blocks(factors)
            mine = conditional_cov(blocks, np.ones(3), apply_floor=False)
            _, oracle = dense_gaussian_condition(factors, mu_x, mu_q, mu_q)
            assert np.abs(mine - oracle).max() <= 1e-10

    def test_floor_engages_on_oversubtraction(self, rng):
        # strong coupling with weights > 1 drives eigenvalues negative
        factors = CovFactors(np.zeros(3), np.array([1.0, 1.0, 1.0]),
                             np.array([[2.0, 0, 0], [0, 2.0, 0], [0, 0, 2.0]]),
                             np.array([0.1, 0.1, 0.1]))
        blocks = covariance_blocks(factors)
        beta_q = np.array([5.0, 5.0, 5.0])
        raw = conditional_cov(blocks, beta_q, apply_floor=False)
        assert np.linalg.eigvalsh(raw).min() < 0.0
        floored = conditional_cov(blocks, beta_q, apply_floor=True)
        eps = 1e-8 * np.trace(blocks.sigma_x) / 3.0
        assert np.linalg.eigvalsh(floored).min() >= eps * (1.0 - 1e-9)


class TestOpacityGate:
    def test_at_mean_returns_base(self, rng):
        sigma_q = np.diag(rng.uniform(0.5, 2.0, 3))
        mu_q = rng.uniform(0, 1, 3)
        q = Query.__new__(Query)
        q.dims = mu_q.copy()
        assert opacity_gate(sigma_q, mu_q, np.ones(3), 0.7, q) == pytest.approx(0.7, abs=1e-15)

    def test_negative_offsets_do_not_attenuate(self):
        sigma_q = np.eye(3)
        mu_q = np.full(3, 2.0)
        q = Query.view([1.0, 1.0, 1.0])  # all components below mu_q
        assert opacity_gate(sigma_q, mu_q, np.ones(3), 0.6, q) == pytest.approx(0.6, abs=1e-15)

    def test_scalar_case_value(self):
        # C=1 setup evaluated against the direct scalar formula
        q = Query.__new__(Query)
        q.dims = np.array([1.0])
        got = opacity_gate(np.array([[1.0]]), np.array([0.0]), np.array([1.0]), 1.0, q)
        want = (1.0 - np.tanh(0.5)) ** 4
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(0.083705, abs=1e-6)

    def test_symmetric_flag(self):
        q = Query.__new__(Query)
        q.dims = np.array([-1.0])
        base = opacity_gate(np.array([[1.0]]), np.array([0.0]), np.array([1.0]), 1.0, q)
        assert base == 1.0  # negative offset, one-sided clamp
        sym = opacity_gate(np.array([[1.0]]), np.array([0.0]), np.array([1.0]), 1.0, q,
                           symmetric=True)
        assert sym == pytest.approx((1.0 - np.tanh(0.5)) ** 4, rel=1e-12)

    def test_factorizes_over_dimensions(self, rng):
        # with a diagonal query block, the joint gate equals the product of
        # per-dimension gates evaluated with the other dims held at mu_q
        sigma_q = np.diag(rng.uniform(0.5, 2.0, 3))
        mu_q = rng.uniform(0, 1, 3)
        beta_q = rng.uniform(0.3, 3.0, 3)
        qdims = mu_q + rng.uniform(-1, 1, 3)
        q = Query.__new__(Query)
        q.dims = qdims
        joint = opacity_gate(sigma_q, mu_q, beta_q, 1.0, q)
        product = 1.0
        for i in range(3):
            qi = Query.__new__(Query)
            dims = mu_q.copy()
            dims[i] = qdims[i]
            qi.dims = dims
            product *= opacity_gate(sigma_q, mu_q, beta_q, 1.0, qi)
        assert joint == pytest.approx(product, rel=1e-12)

    def test_flat_limit_factor_near_one(self):
        # b_q = -5 gives factors within exp(-4 e^-5 |log1p(-d)|) of 1
        beta = np.exp(-5.0)
        for d in np.linspace(0.0, 0.99, 97):
            factor = (1.0 - d) ** (4.0 * beta)
            assert abs(factor - 1.0) <= 4.0 * beta * abs(np.log1p(-d)) + 1e-12


class TestSlice:
    def test_static_passthrough(self, rng):
        scene = random_scene(3, 4, seed=5)
        prim = scene.primitive(2)
        out = slice_primitive(prim, Query.static())
        blocks = covariance_blocks(prim.cov_factors())
        assert np.array_equal(out.mean3, prim.mu_x)
        assert np.abs(out.cov3 - blocks.sigma_x).max() < 1e-14
        assert out.gated_opacity == pytest.approx(prim.opacity, rel=1e-14)
        assert np.array_equal(out.color, prim.color)

    def test_dimension_mismatch(self, rng):
        scene = random_scene(6, 2, seed=5)
        with pytest.raises(ValueError):
            slice_primitive(scene.primitive(0), Query.static())

    def test_gaussian_limit_matches_oracle(self, rng):
        scene = random_scene(6, 64, seed=11)
        scene.b_q[:] = 0.0  # unit shape weights
        q = random_query(6, 21)
        cache = slice_scene(scene, q)
        for i in range(scene.n_primitives):
            p = scene.primitive(i)
            mean, cov = dense_gaussian_condition(p.cov_factors(), p.mu_x, p.mu_q, q.dims)
            assert np.abs(cache.mean3[i] - mean).max() <= 1e-10
            assert np.abs(cache.cov3[i] - cov).max() <= 1e-10
            # gate with beta_q = 1 is the plain product of (1 - d_i)^4
            blocks = covariance_blocks(p.cov_factors())
            want = opacity_gate(blocks.sigma_q, p.mu_q, np.ones(3), p.opacity, q)
            assert cache.gated_opacity[i] == pytest.approx(want, rel=1e-12)

    def test_gate_bounded_by_base_opacity(self, rng):
        scene = random_scene(7, 40, seed=13)
        for k in range(5):
            q = random_query(7, 100 + k)
            cache = slice_scene(scene, q)
            assert np.all(cache.gated_opacity <= scene.opacity + 1e-15)
            assert np.all(cache.gated_opacity >= 0.0)

    def test_gate_monotone_along_positive_ray(self, rng):
        scene = random_scene(6, 1, seed=17)
        prim = scene.primitive(0)
        blocks = covariance_blocks(prim.cov_factors())
        # walk q = mu_q + t * sigma_q @ ones so d_raw = t * ones stays positive
        direction = blocks.sigma_q @ np.ones(3)
        gates = []
        for t in np.linspace(0.0, 3.0, 40):
            q = Query.__new__(Query)
            q.dims = prim.mu_q + t * direction
            gates.append(opacity_gate(blocks.sigma_q, prim.mu_q,
                                      np.exp(prim.b_q), prim.opacity, q))
        assert all(a >= b - 1e-15 for a, b in zip(gates, gates[1:]))

    def test_degenerate_marked_and_skipped(self):
        scene = random_scene(6, 3, seed=23)
        scene.s_q_raw[1] = 800.0  # exp overflows: block is not invertible
        cache = slice_scene(scene, random_query(6, 3))
        assert not cache.valid[1]
        assert cache.valid[[0, 2]].all()
        with pytest.raises(DegeneratePrimitiveError):
            slice_primitive(scene.primitive(1), random_query(6, 3))


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n else v

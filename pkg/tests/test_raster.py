import numpy as np
import pytest

from betasplat.camera import Camera
from betasplat.config import RenderSettings
from betasplat.raster import (CompositeOrderError, Splat2D, composite, kernel2d, project,
                              reference_render, render, render_decomposition,
                              render_with_cache)
from betasplat.scene import Scene, logit
from betasplat.slicing import ConditionedSplat, Query
from betasplat.synthetic import make_synthetic
from betasplat.testing import random_camera, random_query, random_scene

EXACT = RenderSettings(transmittance_min=0.0)


def axis_camera(fx=100.0, size=100):
    return Camera(fx=fx, fy=fx, cx=size / 2.0, cy=size / 2.0,
                  width=size, height=size, world_to_cam=np.eye(4))


def make_splat(mean3, cov3=None, beta_x=4.0, opacity=0.8, color=(1.0, 0.0, 0.0)):
    cov3 = np.eye(3) * 0.01 if cov3 is None else cov3
    return ConditionedSplat(mean3=np.asarray(mean3, float), cov3=cov3,
                            beta_x=beta_x, gated_opacity=opacity,
                            color=np.asarray(color, float))


class TestProjection:
    def test_optical_axis_center(self):
        cam = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100,
                     world_to_cam=np.eye(4))
        s = project(make_splat([0, 0, 1.0]), cam)
        assert np.abs(s.mean2 - 50.0).max() < 1e-12
        assert s.depth == pytest.approx(1.0)

    def test_isotropic_cov_jacobian(self):
        # on-axis isotropic covariance maps to (f*sigma/z)^2 * I, and the
        # analytic 2x2 must match a numerically differentiated projection
        f, z, sig = 80.0, 2.0, 0.05
        cam = axis_camera(fx=f)
        s = project(make_splat([0, 0, z], cov3=np.eye(3) * sig ** 2), cam)
        assert np.abs(s.cov2 - (f * sig / z) ** 2 * np.eye(2)).max() < 1e-9

        def pinhole(p):
            return np.array([f * p[0] / p[2] + 50.0, f * p[1] / p[2] + 50.0])

        mean3 = np.array([0.2, -0.3, 1.7])
        cov3 = np.diag([0.03, 0.05, 0.02]) ** 2
        s = project(make_splat(mean3, cov3=cov3), cam)
        eps = 1e-6
        jac = np.zeros((2, 3))
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = eps
            jac[:, k] = (pinhole(mean3 + dp) - pinhole(mean3 - dp)) / (2 * eps)
        want = jac @ cov3 @ jac.T
        assert np.abs(s.cov2 - want).max() < 1e-6

    def test_behind_camera_culled(self):
        assert project(make_splat([0, 0, -1.0]), axis_camera()) is None

    def test_offscreen_culled_margin(self):
        cam = axis_camera()
        # far off to the side: projected miles outside image + 3 px
        assert project(make_splat([100.0, 0, 1.0]), cam) is None


class TestKernel2D:
    def base(self, beta=4.0, cov2=None):
        return Splat2D(mean2=np.array([5.0, 5.0]), cov2=np.eye(2) if cov2 is None else cov2,
                       depth=1.0, beta_x=beta, gated_opacity=1.0, color=np.ones(3))

    def test_center_is_one(self):
        assert kernel2d([5.0, 5.0], self.base()) == 1.0

    def test_support_boundary_zero(self):
        # dx = 4 with variance 2 gives m = 16 / 2 = 8 = tau^2, exact in floats
        splat = self.base(cov2=np.diag([2.0, 1.0]))
        assert kernel2d([9.0, 5.0], splat) == 0.0
        assert kernel2d([9.1, 5.0], splat) == 0.0
        assert kernel2d([8.9, 5.0], splat) > 0.0

    def test_bell_calibration_value(self):
        # at beta=4 the profile at m=1 sits near the unit bell value
        got = kernel2d([6.0, 5.0], self.base(beta=4.0))
        assert got == pytest.approx(0.586181640625, abs=1e-12)
        assert abs(got - np.exp(-0.5)) < 0.025


class TestComposite:
    def test_empty_is_background(self):
        out = composite([], np.array([3.0, 4.0]), np.array([0.2, 0.3, 0.4]))
        assert np.array_equal(out, [0.2, 0.3, 0.4])

    def test_single_opaque_center(self):
        s = Splat2D(mean2=np.array([8.0, 8.0]), cov2=np.eye(2), depth=1.0,
                    beta_x=4.0, gated_opacity=1.0, color=np.array([1.0, 0, 0]))
        out = composite([s], np.array([8.0, 8.0]), np.zeros(3))
        assert np.abs(out - [0.999, 0.0, 0.0]).max() < 1e-12

    def test_matches_bruteforce_eq1(self, rng):
        # scalar per-pixel loop over the compositing sum, no vectorization
        splats = []
        for i in range(12):
            splats.append(Splat2D(mean2=rng.uniform(0, 16, 2),
                                  cov2=np.eye(2) * rng.uniform(1, 6),
                                  depth=float(i), beta_x=rng.uniform(1, 8),
                                  gated_opacity=rng.uniform(0.1, 1.0),
                                  color=rng.uniform(0, 1, 3), prim_id=i))
        bg = rng.uniform(0, 1, 3)
        settings = EXACT
        for _ in range(20):
            pix = rng.uniform(0, 16, 2)
            want = np.zeros(3)
            t = 1.0
            for s in splats:
                d = pix - s.mean2
                m = float(d @ np.linalg.inv(s.cov2) @ d)
                g = (1 - m / 8.0) ** s.beta_x if m < 8.0 else 0.0
                a = min(s.gated_opacity * g, 0.999)
                want += t * a * s.color
                t *= 1 - a
            want += t * bg
            got = composite(splats, pix, bg, settings)
            assert np.abs(got - want).max() <= 1e-6

    def test_unsorted_raises(self):
        a = Splat2D(np.zeros(2), np.eye(2), depth=2.0, beta_x=4, gated_opacity=0.5,
                    color=np.ones(3), prim_id=0)
        b = Splat2D(np.zeros(2), np.eye(2), depth=1.0, beta_x=4, gated_opacity=0.5,
                    color=np.ones(3), prim_id=1)
        with pytest.raises(CompositeOrderError):
            composite([a, b], np.zeros(2), np.zeros(3), debug=True)


class TestRender:
    def test_empty_scene_background(self):
        scene = Scene.empty(6, background=(0.1, 0.5, 0.9))
        img = render(scene, random_camera(24, 1), random_query(6, 2))
        assert np.abs(img - np.array([0.1, 0.5, 0.9])).max() == 0.0

    def test_view_independent_construction(self):
        # zero cross block + flat query shapes + huge query scales: two
        # distinct view queries must agree pixel for pixel
        scene = random_scene(6, 12, seed=3)
        scene.l_qx[:] = 0.0
        scene.b_q[:] = -5.0
        scene.s_q_raw[:] = np.log(1000.0)
        cam = random_camera(48, 4)
        img1 = render(scene, cam, Query.view([1.0, 0.2, 0.1]))
        img2 = render(scene, cam, Query.view([-0.5, 0.8, -0.2]))
        assert np.abs(img1 - img2).max() <= 1e-6

    @pytest.mark.parametrize("n_dims", [3, 6, 7])
    def test_tiled_equals_reference(self, n_dims):
        scene = random_scene(n_dims, 60, seed=n_dims * 3 + 1)
        cam = random_camera(56, n_dims + 10)
        q = random_query(n_dims, n_dims + 20)
        tiled = render(scene, cam, q, EXACT)
        naive = reference_render(scene, cam, q, EXACT)
        assert np.abs(tiled - naive).max() <= 1e-6

    def test_early_exit_error_bounded(self):
        scene = random_scene(6, 150, seed=31)
        scene.opacity_raw[:] = logit(0.97)  # force deep saturation
        cam = random_camera(48, 32)
        q = random_query(6, 33)
        exact = render(scene, cam, q, EXACT)
        fast = render(scene, cam, q, RenderSettings(transmittance_min=1e-4))
        err = np.abs(exact - fast).max()
        assert 0.0 < err <= 2e-4  # bounded by twice the threshold

    def test_thread_count_determinism(self):
        scene = random_scene(6, 80, seed=41)
        cam = random_camera(64, 42)
        q = random_query(6, 43)
        ref = render(scene, cam, q, RenderSettings(threads=1))
        for threads in (4, 0):
            assert np.array_equal(ref, render(scene, cam, q, RenderSettings(threads=threads)))

    def test_conservation_alpha_plus_transmittance(self):
        scene = random_scene(6, 50, seed=51)
        cache = render_with_cache(scene, random_camera(40, 52), random_query(6, 53))
        assert np.abs(cache.alpha_sum + cache.t_stop - 1.0).max() <= 1e-6

    def test_occlusion_order_swap(self):
        # an opaque occluder in front wins the pixel; swapping depths flips it
        cam = axis_camera(fx=60.0, size=32)
        scene = Scene(
            n_dims=3,
            mu_x=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
            mu_q=np.zeros((2, 0)), rot=np.zeros((2, 3)),
            s_x_raw=np.log(0.2) * np.ones((2, 3)),
            l_qx=np.zeros((2, 0, 3)), s_q_raw=np.zeros((2, 0)),
            b_x=np.zeros(2), b_q=np.zeros((2, 0)),
            opacity_raw=np.array([12.0, 12.0]),  # essentially opaque
            color=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        )
        center = (16, 16)
        img = render(scene, cam, Query.static())
        assert img[center][0] > 0.9 and img[center][1] < 0.1
        scene.mu_x = scene.mu_x[::-1].copy()
        scene.color = scene.color[::-1].copy()
        img2 = render(scene, cam, Query.static())
        assert np.abs(img - img2).max() < 1e-12  # same geometry, same result
        # now actually swap only depths: green moves in front
        scene.mu_x = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
        img3 = render(scene, cam, Query.static())
        assert img3[center][1] > 0.9 and img3[center][0] < 0.1


class TestDecomposition:
    def test_constant_channel_constant_hue(self):
        scene = random_scene(6, 10, seed=61)
        scene.b_x[:] = 1.5
        cam = random_camera(40, 62)
        q = random_query(6, 63)
        cache = render_with_cache(scene, cam, q)
        heat = render_decomposition(scene, cam, q, "b_x")
        covered = cache.alpha_sum > 1e-9
        vals = heat[covered]
        assert covered.any()
        assert np.abs(vals - vals[0]).max() < 1e-9

    def test_temporal_separation(self):
        scene = random_scene(7, 2, seed=64)
        scene.mu_x = np.array([[-0.6, 0.0, 0.0], [0.6, 0.0, 0.0]])
        scene.l_qx[:] = 0.0
        scene.s_q_raw[:] = np.log(50.0)
        scene.b_q[:, 0] = [-5.0, 5.0]
        scene.opacity_raw[:] = 6.0
        cam = Camera.look_at((0, 0, -3.0), (0, 0, 0), (0, 1, 0), 0.9, 48, 48)
        q = Query.view_time(0.0, cam.forward)
        cache = render_with_cache(scene, cam, q)
        heat = render_decomposition(scene, cam, q, "b_t")
        covered = cache.alpha_sum > 0.2
        reds = heat[..., 0][covered]
        blues = heat[..., 2][covered]
        # static half renders blue-ish, transient half red-ish
        assert (reds > blues).any() and (blues > reds).any()

    def test_empty_scene(self):
        scene = Scene.empty(7, background=(0.3, 0.3, 0.3))
        heat = render_decomposition(scene, random_camera(24, 65),
                                    random_query(7, 66), "b_t")
        assert np.abs(heat - 0.3).max() == 0.0

    def test_channel_availability(self):
        scene6 = random_scene(6, 2, seed=67)
        with pytest.raises(ValueError):
            render_decomposition(scene6, random_camera(16, 68), random_query(6, 69), "b_t")
        scene3 = random_scene(3, 2, seed=70)
        with pytest.raises(ValueError):
            render_decomposition(scene3, random_camera(16, 71), Query.static(), "b_d")
        with pytest.raises(ValueError):
            render_decomposition(scene6, random_camera(16, 72), random_query(6, 73), "bogus")

    def test_weights_match_render(self):
        # with every primitive's channel value equal, heat picks cmap color
        # wherever any alpha lands; weights come from the same compositing
        scene = random_scene(6, 6, seed=74)
        scene.b_x[:] = 0.0
        cam = random_camera(32, 75)
        q = random_query(6, 76)
        heat = render_decomposition(scene, cam, q, "b_x")
        cache = render_with_cache(scene, cam, q)
        mid = np.array([0.95, 0.95, 0.95])  # cmap at 0.5
        covered = cache.alpha_sum > 1e-12
        assert np.abs(heat[covered] - mid).max() < 1e-9
        assert np.abs(heat[~covered] - scene.background).max() < 1e-12

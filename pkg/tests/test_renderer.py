import numpy as np
import pytest

from rgsplat import tensor as T
from rgsplat.geometry import Camera
from rgsplat.renderer import (
    GaussianSet,
    RenderError,
    RenderSettings,
    pack_params,
    param_width,
    project_gaussian,
    render,
    render_backward,
    render_forward,
    sh_eval,
)

from conftest import gradcheck


def make_camera(w=32, h=32, f=None):
    f = f or float(w)
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    return Camera(K, np.eye(3), np.zeros(3), width=w, height=h)


def random_gaussians(rng, m, sh_degree=1, depth_range=(2.0, 4.0), spread=0.8,
                     logit_range=(-1.0, 2.0), scale_range=(-2.6, -1.2)):
    """Random parameter rows framed in front of the identity camera."""
    pos = np.column_stack(
        [
            rng.uniform(-spread, spread, m),
            rng.uniform(-spread, spread, m),
            rng.uniform(*depth_range, m),
        ]
    )
    logit = rng.uniform(*logit_range, m)
    logs = rng.uniform(*scale_range, (m, 3))
    quat = rng.normal(0, 1, (m, 4))
    quat[:, 0] += 2.0  # keep away from zero norm
    K = (sh_degree + 1) ** 2
    sh = np.zeros((m, K, 3))
    sh[:, 0, :] = rng.uniform(-0.9, 0.9, (m, 3))  # DC keeps colors inside (0,1)
    if K > 1:
        sh[:, 1:, :] = rng.normal(0, 0.02, (m, K - 1, 3))
    return pack_params(pos, logit, logs, quat, sh.reshape(m, -1), sh_degree)


def brute_force_render(gvals, camera, sh_degree, settings):
    """Per-pixel compositing over every Gaussian, written from first principles."""
    H, W = camera.height, camera.width
    C0 = 0.28209479177387814
    C1 = 0.4886025119029199
    rows = []
    for i in range(gvals.shape[0]):
        row = np.asarray(gvals[i], dtype=np.float64)
        mu = row[0:3]
        xc = camera.R @ mu + camera.t
        if xc[2] <= settings.near_clip:
            continue
        alpha = 1.0 / (1.0 + np.exp(-row[3]))
        s = np.exp(row[4:7])
        q = row[7:11] / np.linalg.norm(row[7:11])
        w_, x_, y_, z_ = q
        R = np.array(
            [
                [1 - 2 * (y_**2 + z_**2), 2 * (x_ * y_ - w_ * z_), 2 * (x_ * z_ + w_ * y_)],
                [2 * (x_ * y_ + w_ * z_), 1 - 2 * (x_**2 + z_**2), 2 * (y_ * z_ - w_ * x_)],
                [2 * (x_ * z_ - w_ * y_), 2 * (y_ * z_ + w_ * x_), 1 - 2 * (x_**2 + y_**2)],
            ]
        )
        Sigma = R @ np.diag(s**2) @ R.T
        fx, fy = camera.fx, camera.fy
        x, y, z = xc
        J = np.array([[fx / z, 0, -fx * x / z**2], [0, fy / z, -fy * y / z**2]])
        C = J @ camera.R @ Sigma @ camera.R.T @ J.T + settings.dilation_px**2 * np.eye(2)
        mean = np.array([fx * x / z + camera.K[0, 2], fy * y / z + camera.K[1, 2]])
        Cinv = np.linalg.inv(C)
        d = mu - camera.center
        d = d / np.linalg.norm(d)
        K = (sh_degree + 1) ** 2
        coeff = row[11 : 11 + 3 * K].reshape(K, 3)
        basis = [C0]
        if sh_degree >= 1:
            basis += [-C1 * d[1], C1 * d[2], -C1 * d[0]]
        color = np.clip(np.asarray(basis) @ coeff[: len(basis)] + 0.5, 0.0, 1.0)
        rows.append((z, i, alpha, mean, Cinv, color))
    rows.sort(key=lambda r: (r[0], r[1]))

    img = np.zeros((H, W, 3))
    alpha_img = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            trans = 1.0
            acc = np.zeros(3)
            for z, i, alpha, mean, Cinv, color in rows:
                dd = np.array([px + 0.5 - mean[0], py + 0.5 - mean[1]])
                m2 = dd @ Cinv @ dd
                if m2 < 0:
                    continue
                if settings.sigma_cutoff is not None and m2 > settings.sigma_cutoff**2:
                    continue
                ap = min(settings.alpha_cap, alpha * np.exp(-0.5 * m2))
                if settings.alpha_min is not None and ap < settings.alpha_min:
                    continue
                acc += color * ap * trans
                trans *= 1.0 - ap
            img[py, px] = acc
            alpha_img[py, px] = 1.0 - trans
    return img, alpha_img


class TestProjectGaussian:
    def test_isotropic_on_axis_closed_form(self):
        cam = make_camera(w=32, h=32, f=48.0)
        d, s = 3.0, 0.2
        row = pack_params([[0, 0, d]], [0.0], [np.log(s)] * 3, [[1, 0, 0, 0]],
                          np.zeros((1, 12)))
        mean, cov, depth, culled = project_gaussian(cam, row[0])
        assert not culled and depth == d
        expect = (48.0 * s / d) ** 2 * np.eye(2) + 0.09 * np.eye(2)
        np.testing.assert_allclose(cov, expect, rtol=1e-6)
        np.testing.assert_allclose(mean, [16, 16], atol=1e-12)

    def test_behind_camera_flagged_for_culling(self):
        cam = make_camera()
        row = pack_params([[0, 0, -2.0]], [0.0], [-1.0] * 3, [[1, 0, 0, 0]],
                          np.zeros((1, 12)))
        assert project_gaussian(cam, row[0])[3] is True

    def test_doubling_scales_quadruples_covariance(self, rng):
        cam = make_camera()
        base = random_gaussians(rng, 1)
        doubled = base.copy()
        doubled[0, 4:7] += np.log(2.0)
        _, cov1, _, _ = project_gaussian(cam, base[0])
        _, cov2, _, _ = project_gaussian(cam, doubled[0])
        dil = 0.09 * np.eye(2)
        np.testing.assert_allclose(cov2 - dil, 4 * (cov1 - dil), rtol=1e-5)


class TestRenderForward:
    def test_saturated_single_splat_center_color(self, f64):
        cam = make_camera(w=17, h=17)
        color = np.array([0.7, 0.2, 0.5])
        sh = np.zeros((1, 4, 3))
        sh[0, 0] = (color - 0.5) / 0.28209479177387814
        row = pack_params([[0, 0, 2.0]], [10.0], [np.log(1.5)] * 3, [[1, 0, 0, 0]],
                          sh.reshape(1, -1))
        gs = GaussianSet(T.Tensor(row), T.Tensor(np.zeros((1, 4))))
        view = render(gs, cam)
        np.testing.assert_allclose(view.rgb.values[8, 8], color * 0.999, atol=1e-3)

    def test_empty_set_renders_black(self, f64):
        cam = make_camera()
        gs = GaussianSet(T.Tensor(np.zeros((0, param_width(1)))), T.Tensor(np.zeros((0, 4))))
        view = render(gs, cam)
        assert not view.rgb.values.any() and not view.alpha.any()

    def test_matches_brute_force_oracle(self, f64, rng):
        cam = make_camera(w=24, h=20)
        gvals = random_gaussians(rng, 12).astype(np.float64)
        settings = RenderSettings()
        rgb, alpha, _, _ = render_forward(gvals, cam, 1, settings)
        oracle_rgb, oracle_alpha = brute_force_render(gvals, cam, 1, settings)
        np.testing.assert_allclose(rgb, oracle_rgb, atol=1e-6)
        np.testing.assert_allclose(alpha, oracle_alpha, atol=1e-6)

    def test_two_overlapping_gaussians_oracle(self, f64):
        cam = make_camera(w=16, h=16)
        sh = np.zeros((2, 4, 3))
        sh[0, 0] = (np.array([0.9, 0.1, 0.1]) - 0.5) / 0.28209479177387814
        sh[1, 0] = (np.array([0.1, 0.1, 0.9]) - 0.5) / 0.28209479177387814
        rows = pack_params(
            [[-0.1, 0, 2.0], [0.1, 0, 2.5]], [1.0, 2.0],
            np.full((2, 3), np.log(0.4)), [[1, 0, 0, 0], [0.9, 0.1, 0, 0]],
            sh.reshape(2, -1))
        settings = RenderSettings()
        rgb, alpha, _, _ = render_forward(rows.astype(np.float64), cam, 1, settings)
        orgb, oalpha = brute_force_render(rows, cam, 1, settings)
        np.testing.assert_allclose(rgb, orgb, atol=1e-6)

    def test_tiling_transparency(self, f64, rng):
        cam = make_camera(w=33, h=18)  # sizes not divisible by tiles
        gvals = random_gaussians(rng, 20).astype(np.float64)
        outs = []
        for ts in (8, 16, 4096):
            settings = RenderSettings(tile_size=ts)
            rgb, alpha, depth, _ = render_forward(gvals, cam, 1, settings)
            outs.append((rgb, alpha, depth))
        for other in outs[1:]:
            np.testing.assert_allclose(outs[0][0], other[0], atol=1e-6)
            np.testing.assert_allclose(outs[0][1], other[1], atol=1e-6)
            np.testing.assert_allclose(outs[0][2], other[2], atol=1e-6)

    def test_equal_depth_composites_by_index_order(self, f64):
        cam = make_camera(w=9, h=9)
        sh = np.zeros((2, 4, 3))
        sh[0, 0] = (np.array([1.0, 0.0, 0.0]) - 0.5) / 0.28209479177387814
        sh[1, 0] = (np.array([0.0, 0.0, 1.0]) - 0.5) / 0.28209479177387814
        rows = pack_params([[0, 0, 2.0], [0, 0, 2.0]], [8.0, 8.0],
                           np.full((2, 3), np.log(1.0)),
                           np.tile([1, 0, 0, 0], (2, 1)), sh.reshape(2, -1))
        rgb, _, _, _ = render_forward(rows.astype(np.float64), cam, 1,
                                      RenderSettings())
        # the lower index saturates the pixel first, so red wins
        assert rgb[4, 4, 0] > 0.9 and rgb[4, 4, 2] < 0.1

    def test_alpha_bounds_and_determinism(self, f64, rng):
        cam = make_camera(w=20, h=20)
        gvals = random_gaussians(rng, 30, logit_range=(2.0, 6.0)).astype(np.float64)
        r1, a1, d1, _ = render_forward(gvals, cam, 1, RenderSettings())
        r2, a2, d2, _ = render_forward(gvals, cam, 1, RenderSettings())
        assert np.array_equal(r1, r2) and np.array_equal(a1, a2)
        assert a1.min() >= 0.0 and a1.max() <= 1.0
        assert r1.min() >= 0.0 and r1.max() <= 1.0


class TestRenderBackward:
    def test_gradients_match_finite_differences(self, f64, rng):
        cam = make_camera(w=8, h=8, f=10.0)
        settings = RenderSettings(sigma_cutoff=None, alpha_min=None)
        gvals = random_gaussians(rng, 3, scale_range=(-1.6, -0.7)).astype(np.float64)
        up = rng.uniform(-1, 1, (8, 8, 3))

        g = T.Tensor(gvals, requires_grad=True, dtype=np.float64)

        def loss(g):
            gs = GaussianSet(g, T.Tensor(np.zeros((3, 4)), dtype=np.float64))
            view = render(gs, cam, settings)
            return T.tsum(view.rgb * T.Tensor(up, dtype=np.float64))

        gradcheck(loss, [g], tol=1e-4, h=1e-5)

    def test_zero_upstream_gives_zero_gradients(self, f64, rng):
        cam = make_camera(w=12, h=12)
        gvals = random_gaussians(rng, 5).astype(np.float64)
        _, _, _, ctx = render_forward(gvals, cam, 1, RenderSettings())
        grad = render_backward(ctx, np.zeros((12, 12, 3)))
        assert not grad.any()

    def test_occluded_back_gaussian_gets_no_gradient(self, f64):
        cam = make_camera(w=9, h=9)
        m = 4
        sh = np.zeros((m, 4, 3))
        sh[:, 0] = 0.3
        # three saturated front layers, one hidden behind them
        pos = [[0, 0, 1.5], [0, 0, 1.6], [0, 0, 1.7], [0, 0, 3.0]]
        scales = np.full((m, 3), np.log(12.0))
        scales[3] = np.log(0.5)
        rows = pack_params(pos, [12.0, 12.0, 12.0, 0.5], scales,
                           np.tile([1.0, 0, 0, 0], (m, 1)), sh.reshape(m, -1))
        _, _, _, ctx = render_forward(rows.astype(np.float64), cam, 1, RenderSettings())
        grad = render_backward(ctx, np.ones((9, 9, 3)))
        assert np.abs(grad[3]).max() < 1e-6
        assert np.abs(grad[0]).max() > 1e-6  # front one does learn

    def test_culled_gaussian_gets_zero_gradient(self, f64, rng):
        cam = make_camera(w=8, h=8)
        gvals = random_gaussians(rng, 3).astype(np.float64)
        gvals[1, 2] = -5.0  # behind the camera
        _, _, _, ctx = render_forward(gvals, cam, 1, RenderSettings())
        grad = render_backward(ctx, np.ones((8, 8, 3)))
        assert not grad[1].any()

    def test_context_is_single_use(self, f64, rng):
        cam = make_camera(w=8, h=8)
        gvals = random_gaussians(rng, 2).astype(np.float64)
        _, _, _, ctx = render_forward(gvals, cam, 1, RenderSettings())
        render_backward(ctx, np.zeros((8, 8, 3)))
        with pytest.raises(RenderError, match="consumed"):
            render_backward(ctx, np.zeros((8, 8, 3)))

    def test_mismatched_upstream_rejected(self, f64, rng):
        cam = make_camera(w=8, h=8)
        gvals = random_gaussians(rng, 2).astype(np.float64)
        _, _, _, ctx = render_forward(gvals, cam, 1, RenderSettings())
        with pytest.raises(RenderError, match="shape"):
            render_backward(ctx, np.zeros((4, 4, 3)))


class TestSphericalHarmonics:
    def test_dc_band_closed_form(self, f64):
        c = np.array([[0.4, -0.2, 0.8]])
        out = sh_eval(c, [0, 0, 1.0], degree=0)
        np.testing.assert_allclose(
            out.values, 0.282095 * c[0] + 0.5, atol=1e-6
        )

    def test_degree_one_odd_parity(self, f64, rng):
        c = rng.normal(0, 0.3, (4, 3))
        d = rng.normal(0, 1, 3)
        d /= np.linalg.norm(d)
        plus = sh_eval(c, d, degree=1).values
        minus = sh_eval(c, -d, degree=1).values
        dc = 0.28209479177387814 * c[0] + 0.5
        np.testing.assert_allclose(plus - dc, -(minus - dc), atol=1e-12)

    def test_matches_polynomial_oracle(self, f64, rng):
        """Direct basis-polynomial evaluation on 100 random directions."""
        c = rng.normal(0, 0.3, (9, 3))
        for _ in range(100):
            d = rng.normal(0, 1, 3)
            d /= np.linalg.norm(d)
            x, y, z = d
            basis = np.array(
                [
                    0.28209479177387814,
                    -0.4886025119029199 * y,
                    0.4886025119029199 * z,
                    -0.4886025119029199 * x,
                    1.0925484305920792 * x * y,
                    -1.0925484305920792 * y * z,
                    0.31539156525252005 * (2 * z * z - x * x - y * y),
                    -1.0925484305920792 * x * z,
                    0.5462742152960396 * (x * x - y * y),
                ]
            )
            expect = basis @ c + 0.5
            got = sh_eval(c, d, degree=2).values
            np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_non_unit_direction_rejected(self, f64):
        with pytest.raises(RenderError, match="unit"):
            sh_eval(np.zeros((4, 3)), [1.0, 1.0, 0.0], degree=1)

    def test_differentiable_in_coefficients(self, f64, rng):
        c = T.Tensor(rng.normal(0, 0.3, (4, 3)), requires_grad=True, dtype=np.float64)
        d = np.array([0.0, 0.6, 0.8])
        gradcheck(lambda c: T.tsum(T.square(sh_eval(c, d, degree=1))), [c])


class TestRenderCost:
    def test_fewer_gaussians_render_faster(self, rng):
        import time

        cam = make_camera(w=64, h=64)
        small = random_gaussians(rng, 64)
        big = np.concatenate([random_gaussians(rng, 64) for _ in range(16)])
        settings = RenderSettings()
        render_forward(small, cam, 1, settings)  # warm up
        t0 = time.perf_counter()
        for _ in range(3):
            render_forward(small, cam, 1, settings)
        t_small = time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(3):
            render_forward(big, cam, 1, settings)
        t_big = time.perf_counter() - t0
        assert t_small < t_big

"""Differentiable tile-based rasterizer for 3D Gaussians.

Forward: EWA projection of each Gaussian to a screen-space mean and 2x2
covariance, tile binning for culling, then per-pixel front-to-back alpha
compositing C = sum_i c_i a'_i prod_{j<i} (1 - a'_j) with
a'_i = min(cap, alpha_i * exp(-0.5 d^T cov2d^-1 d)).

The 3-sigma extent and the minimum-alpha floor are part of the per-pair
contribution definition, so the result is exactly independent of the tile
size; tiles only cull work. Both cutoffs can be disabled, which makes the
forward smooth everywhere (used by the finite-difference gradient tests).

Backward: analytic gradients for every raw parameter column, accumulated
per Gaussian from the same pair decomposition the forward produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import Camera


class RenderError(RuntimeError):
    pass


# raw parameter layout: [position 3 | opacity logit 1 | log-scale 3 | quat 4 | SH]
POS = slice(0, 3)
OPACITY = 3
LOG_SCALE = slice(4, 7)
QUAT = slice(7, 11)
SH_START = 11


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def param_width(sh_degree: int) -> int:
    return 11 + 3 * sh_coeff_count(sh_degree)


@dataclass
class GaussianSet:
    """Raw Gaussian parameter rows plus per-Gaussian hidden state."""

    g: T.Tensor  # M x C2
    z: T.Tensor  # M x C1
    step: int = 0
    sh_degree: int = 1

    def __post_init__(self):
        want = param_width(self.sh_degree)
        if self.g.ndim != 2 or self.g.shape[1] != want:
            raise RenderError(
                f"parameter matrix has width {self.g.shape}, expected (M, {want})"
            )

    @property
    def count(self) -> int:
        return self.g.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.g.values[:, POS]

    def detached(self) -> "GaussianSet":
        return GaussianSet(self.g.detach(), self.z.detach(), self.step, self.sh_degree)


@dataclass
class RenderSettings:
    tile_size: int = 16
    sigma_cutoff: Optional[float] = 3.0
    alpha_min: Optional[float] = 1.0 / 255.0
    alpha_cap: float = 0.999
    dilation_px: float = 0.3
    near_clip: float = 0.01


@dataclass
class RenderedView:
    rgb: T.Tensor  # H x W x 3 in [0, 1]
    alpha: np.ndarray  # H x W
    depth: np.ndarray  # H x W, alpha-weighted camera depth


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis rows (splatting sign convention) for unit directions."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, _C0)]
    if degree >= 1:
        cols += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        cols += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2 * z * z - x * x - y * y),
            _C2[3] * x * z,
            _C2[4] * (x * x - y * y),
        ]
    if degree >= 3:
        raise RenderError("SH degree above 2 is not supported")
    return np.stack(cols, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (M, K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [
            np.stack([zero, np.full_like(x, -_C1), zero], axis=-1),
            np.stack([zero, zero, np.full_like(x, _C1)], axis=-1),
            np.stack([np.full_like(x, -_C1), zero, zero], axis=-1),
        ]
    if degree >= 2:
        rows += [
            _C2[0] * np.stack([y, x, zero], axis=-1),
            _C2[1] * np.stack([zero, z, y], axis=-1),
            _C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1),
            _C2[3] * np.stack([z, zero, x], axis=-1),
            _C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=1)


def sh_eval(coeffs, direction, degree: int) -> T.Tensor:
    """Evaluate SH color for one direction; differentiable in the coefficients.

    ``coeffs`` is (K, 3) coefficient-major; the DC band carries the usual
    +0.5 offset so zero coefficients mean mid-gray.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-6:
        raise RenderError(f"direction must be unit length, |d| = {n}")
    basis = sh_basis(d[None], degree)[0].astype(T.default_dtype())
    c = T.as_tensor(coeffs)
    return T.reshape(T.Tensor(basis[None, :]) @ c, (3,)) + 0.5


# ---------------------------------------------------------------------------
# activation and projection of raw parameter rows
# ---------------------------------------------------------------------------

def _quat_rotmats(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class _ForwardContext:
    """Everything the analytic backward needs from one forward pass."""

    __slots__ = (
        "gvals", "camera", "settings", "sh_degree", "hw",
        "valid_idx", "xc", "z", "J_entries", "cov", "inv", "mean2d",
        "alpha", "qn", "qnorm", "scales", "M3", "Rq", "Sigma",
        "colors_raw", "colors", "basis", "dirs", "vlen",
        "pix", "gid", "alpha_p", "Gw", "Trans", "sort_order", "consumed",
    )


def _segment_firsts(sorted_ids: np.ndarray) -> np.ndarray:
    """For each element of a sorted id array, the index where its run starts."""
    n = sorted_ids.size
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_ids)) + 1])
    lens = np.diff(np.concatenate([starts, [n]]))
    return np.repeat(starts, lens)


def render_forward(gvals: np.ndarray, camera: Camera, sh_degree: int,
                   settings: RenderSettings):
    """Rasterize raw parameter rows; returns (rgb, alpha, depth, ctx)."""
    dt = gvals.dtype
    H, W = camera.height, camera.width
    M = gvals.shape[0]
    ctx = _ForwardContext()
    ctx.gvals = gvals
    ctx.camera = camera
    ctx.settings = settings
    ctx.sh_degree = sh_degree
    ctx.hw = (H, W)
    ctx.consumed = False

    rgb = np.zeros((H, W, 3), dtype=dt)
    alpha_img = np.zeros((H, W), dtype=dt)
    depth_img = np.zeros((H, W), dtype=dt)
    if M == 0:
        ctx.valid_idx = np.empty(0, dtype=np.int64)
        ctx.pix = np.empty(0, dtype=np.int64)
        return rgb, alpha_img, depth_img, ctx

    mu = gvals[:, POS]
    Rcam = camera.R.astype(dt)
    tcam = camera.t.astype(dt)
    xc_all = mu @ Rcam.T + tcam
    valid = xc_all[:, 2] > settings.near_clip
    valid_idx = np.flatnonzero(valid)
    ctx.valid_idx = valid_idx
    if valid_idx.size == 0:
        ctx.pix = np.empty(0, dtype=np.int64)
        return rgb, alpha_img, depth_img, ctx

    g = gvals[valid_idx]
    xc = xc_all[valid_idx]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    cx, cy = dt.type(camera.K[0, 2]), dt.type(camera.K[1, 2])

    alpha = _sigmoid(g[:, OPACITY])
    scales = np.exp(g[:, LOG_SCALE])
    qraw = g[:, QUAT]
    qnorm = np.linalg.norm(qraw, axis=1)
    if np.any(qnorm == 0):
        raise RenderError("zero quaternion cannot be normalized")
    qn = qraw / qnorm[:, None]
    Rq = _quat_rotmats(qn)
    M3 = Rq * scales[:, None, :]  # R diag(s)
    Sigma = M3 @ M3.transpose(0, 2, 1)

    invz = 1.0 / z
    J = np.zeros((len(z), 2, 3), dtype=dt)
    J[:, 0, 0] = fx * invz
    J[:, 0, 2] = -fx * x * invz * invz
    J[:, 1, 1] = fy * invz
    J[:, 1, 2] = -fy * y * invz * invz
    Tm = J @ Rcam
    cov = Tm @ Sigma @ Tm.transpose(0, 2, 1)
    dil = dt.type(settings.dilation_px) ** 2
    cov[:, 0, 0] += dil
    cov[:, 1, 1] += dil
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    mean2d = np.stack([fx * x * invz + cx, fy * y * invz + cy], axis=-1)

    # view-dependent color from SH, clamped to [0, 1] with gradient gating
    cam_center = camera.center.astype(dt)
    vdir = mu[valid_idx] - cam_center
    vlen = np.linalg.norm(vdir, axis=1)
    vlen = np.maximum(vlen, np.finfo(dt).tiny)
    dirs = vdir / vlen[:, None]
    K = sh_coeff_count(sh_degree)
    coeffs = g[:, SH_START : SH_START + 3 * K].reshape(-1, K, 3)
    basis = sh_basis(dirs, sh_degree).astype(dt)
    colors_raw = np.einsum("mk,mkc->mc", basis, coeffs) + dt.type(0.5)
    colors = np.clip(colors_raw, 0.0, 1.0)

    ctx.xc, ctx.z = xc, z
    ctx.alpha, ctx.qn, ctx.qnorm = alpha, qn, qnorm
    ctx.scales, ctx.M3, ctx.Rq, ctx.Sigma = scales, M3, Rq, Sigma
    ctx.J_entries = J
    ctx.cov, ctx.inv, ctx.mean2d = cov, inv, mean2d
    ctx.colors_raw, ctx.colors = colors_raw, colors
    ctx.basis, ctx.dirs, ctx.vlen = basis, dirs, vlen

    # tile binning: bounding box of the effective cutoff ellipse (or the
    # whole image). The reach of a Gaussian is limited both by the sigma
    # cutoff and by where alpha * exp(-m/2) falls below the alpha floor,
    # so the bbox can use the tighter of the two; pairs outside it would
    # be dropped by the per-pair predicate anyway.
    ts = settings.tile_size
    ntx = (W + ts - 1) // ts
    nty = (H + ts - 1) // ts
    nv = len(valid_idx)
    if settings.sigma_cutoff is not None:
        cut2 = np.full(nv, settings.sigma_cutoff**2, dtype=dt)
        if settings.alpha_min is not None:
            ratio = np.maximum(alpha / settings.alpha_min, 1e-12)
            cut2 = np.minimum(cut2, 2.0 * np.log(np.maximum(ratio, 1.0)))
        # tight axis-aligned bounds of the cutoff ellipse
        rx = np.sqrt(cut2 * np.maximum(a, 0))
        ry = np.sqrt(cut2 * np.maximum(c, 0))
        bx0 = np.clip(np.floor(mean2d[:, 0] - rx), 0, W - 1).astype(np.int64)
        bx1 = np.clip(np.ceil(mean2d[:, 0] + rx), 0, W - 1).astype(np.int64)
        by0 = np.clip(np.floor(mean2d[:, 1] - ry), 0, H - 1).astype(np.int64)
        by1 = np.clip(np.ceil(mean2d[:, 1] + ry), 0, H - 1).astype(np.int64)
        offscreen = (
            (mean2d[:, 0] + rx < 0)
            | (mean2d[:, 0] - rx > W)
            | (mean2d[:, 1] + ry < 0)
            | (mean2d[:, 1] - ry > H)
            | (rx <= 0)
            | (ry <= 0)
        )
    else:
        bx0 = np.zeros(nv, dtype=np.int64)
        bx1 = np.full(nv, W - 1, dtype=np.int64)
        by0 = np.zeros(nv, dtype=np.int64)
        by1 = np.full(nv, H - 1, dtype=np.int64)
        offscreen = np.zeros(nv, dtype=bool)

    tx0, tx1 = bx0 // ts, bx1 // ts
    ty0, ty1 = by0 // ts, by1 // ts
    ntiles = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    ntiles[offscreen] = 0
    total_gt = int(ntiles.sum())
    if total_gt == 0:
        ctx.pix = np.empty(0, dtype=np.int64)
        ctx.gid = np.empty(0, dtype=np.int64)
        return rgb, alpha_img, depth_img, ctx

    gt_g = np.repeat(np.arange(nv), ntiles)
    base = np.repeat(np.cumsum(ntiles) - ntiles, ntiles)
    local = np.arange(total_gt) - base
    tspan = np.repeat(tx1 - tx0 + 1, ntiles)
    tile_x = np.repeat(tx0, ntiles) + local % tspan
    tile_y = np.repeat(ty0, ntiles) + local // tspan

    # expand each (gaussian, tile) pair into the pixels of tile ∩ bbox;
    # tiles only cull, the candidate set is exactly the clipped bbox
    px0 = np.maximum(tile_x * ts, bx0[gt_g])
    px1 = np.minimum(tile_x * ts + ts - 1, bx1[gt_g])
    py0 = np.maximum(tile_y * ts, by0[gt_g])
    py1 = np.minimum(tile_y * ts + ts - 1, by1[gt_g])
    wspan = px1 - px0 + 1
    hspan = py1 - py0 + 1
    area = wspan * hspan
    total = int(area.sum())
    base_px = np.repeat(np.cumsum(area) - area, area)
    local_px = np.arange(total) - base_px
    wrep = np.repeat(wspan, area)
    px = np.repeat(px0, area) + local_px % wrep
    py = np.repeat(py0, area) + local_px // wrep
    gid = np.repeat(gt_g, area)

    dx = (px + dt.type(0.5)) - mean2d[gid, 0]
    dy = (py + dt.type(0.5)) - mean2d[gid, 1]
    mahal = (
        inv[gid, 0, 0] * dx * dx
        + 2.0 * inv[gid, 0, 1] * dx * dy
        + inv[gid, 1, 1] * dy * dy
    )
    keep = mahal >= 0  # guard against degenerate numerics
    if settings.sigma_cutoff is not None:
        keep &= mahal <= settings.sigma_cutoff**2
    px, py, gid, mahal = px[keep], py[keep], gid[keep], mahal[keep]
    Gw = np.exp(-0.5 * mahal)
    alpha_p = np.minimum(alpha[gid] * Gw, dt.type(settings.alpha_cap))
    if settings.alpha_min is not None:
        keep2 = alpha_p >= settings.alpha_min
        px, py, gid = px[keep2], py[keep2], gid[keep2]
        Gw, alpha_p = Gw[keep2], alpha_p[keep2]

    if px.size:
        # canonical order: by pixel, then by global front-to-back depth rank
        rank_of = np.empty(len(valid_idx), dtype=np.int64)
        rank_of[np.argsort(z, kind="stable")] = np.arange(len(valid_idx))
        pixid = py.astype(np.int64) * W + px.astype(np.int64)
        order = np.lexsort((rank_of[gid], pixid))
        pixid, gid = pixid[order], gid[order]
        Gw, alpha_p = Gw[order], alpha_p[order]
        ctx.sort_order = order  # pairs before this sort are grouped by Gaussian

        logs = np.log1p(-alpha_p)
        cs = np.cumsum(logs)
        first = _segment_firsts(pixid)
        excl = (cs - logs) - (cs[first] - logs[first])
        Trans = np.exp(excl)
        w = alpha_p * Trans

        npx = H * W
        for ch in range(3):
            rgb.reshape(-1, 3)[:, ch] = np.bincount(
                pixid, weights=w * ctx.colors[gid, ch], minlength=npx
            ).astype(dt)
        total_log = np.bincount(pixid, weights=logs, minlength=npx)
        alpha_flat = -np.expm1(total_log)
        alpha_img[:] = alpha_flat.reshape(H, W).astype(dt)
        depth_img.reshape(-1)[:] = np.bincount(
            pixid, weights=w * z[gid], minlength=npx
        ).astype(dt)

        ctx.pix = pixid
        ctx.gid = gid
        ctx.alpha_p = alpha_p
        ctx.Gw = Gw
        ctx.Trans = Trans
    else:
        ctx.pix = np.empty(0, dtype=np.int64)
        ctx.gid = np.empty(0, dtype=np.int64)
    return rgb, alpha_img, depth_img, ctx


def render_backward(ctx: _ForwardContext, upstream: np.ndarray) -> np.ndarray:
    """Analytic gradients of the rendered image w.r.t. every raw column."""
    if ctx.consumed:
        raise RenderError("forward context already consumed by a backward pass")
    ctx.consumed = True
    gvals = ctx.gvals
    dt = gvals.dtype
    H, W = ctx.hw
    upstream = np.asarray(upstream, dtype=dt)
    if upstream.shape != (H, W, 3):
        raise RenderError(
            f"upstream gradient shape {upstream.shape} does not match render {(H, W, 3)}"
        )
    grad = np.zeros_like(gvals)
    if ctx.valid_idx.size == 0 or ctx.pix.size == 0:
        return grad

    nv = ctx.valid_idx.size
    pix, gid = ctx.pix, ctx.gid
    alpha_p, Gw, Trans = ctx.alpha_p, ctx.Gw, ctx.Trans
    colors = ctx.colors
    up = upstream.reshape(-1, 3)[pix]  # P x 3

    w = alpha_p * Trans
    # per-gaussian color gradient and per-pair alpha' gradient
    pair_colors = colors[gid]  # P x 3
    v = w[:, None] * pair_colors
    cs = np.cumsum(v, axis=0)
    seg_starts = np.concatenate([[0], np.flatnonzero(np.diff(pix)) + 1])
    seg_lens = np.diff(np.concatenate([seg_starts, [len(pix)]]))
    first = np.repeat(seg_starts, seg_lens)
    seg_total_pair = np.repeat(np.add.reduceat(v, seg_starts, axis=0), seg_lens, axis=0)
    before_seg = cs[first] - v[first]
    suffix = seg_total_pair - (cs - before_seg)  # sums over later pairs in pixel
    one_minus = 1.0 - alpha_p
    d_alpha_pair = np.einsum(
        "pc,pc->p", up, Trans[:, None] * pair_colors - suffix / one_minus[:, None]
    )

    # gate through alpha' = min(cap, alpha * Gw)
    capped = ctx.alpha[gid] * Gw >= ctx.settings.alpha_cap
    d_alpha_pair = np.where(capped, 0.0, d_alpha_pair)
    d_power = d_alpha_pair * ctx.alpha[gid] * Gw  # dGw = exp(power) chain

    inv = ctx.inv
    mean2d = ctx.mean2d
    dx = (pix % W + dt.type(0.5)) - mean2d[gid, 0]
    dy = (pix // W + dt.type(0.5)) - mean2d[gid, 1]
    Adx = inv[gid, 0, 0] * dx + inv[gid, 0, 1] * dy
    Ady = inv[gid, 0, 1] * dx + inv[gid, 1, 1] * dy

    # one segmented pass accumulates every per-pair quantity onto its
    # Gaussian; undoing the forward's pixel sort restores Gaussian grouping,
    # so no second sort is needed
    pair_payload = np.stack(
        [
            w * up[:, 0], w * up[:, 1], w * up[:, 2],
            d_alpha_pair * Gw,
            d_power * Adx, d_power * Ady,
            d_power * (-0.5 * dx * dx),
            d_power * (-0.5 * dx * dy),
            d_power * (-0.5 * dy * dy),
        ],
        axis=1,
    )
    payload_g = np.empty_like(pair_payload)
    payload_g[ctx.sort_order] = pair_payload
    gid_g = np.empty_like(gid)
    gid_g[ctx.sort_order] = gid
    g_starts = np.concatenate([[0], np.flatnonzero(np.diff(gid_g)) + 1])
    seg_sums = np.add.reduceat(payload_g, g_starts, axis=0)
    sums = np.zeros((nv, pair_payload.shape[1]), dtype=dt)
    sums[gid_g[g_starts]] = seg_sums
    d_colors = sums[:, 0:3]
    d_alpha_g = sums[:, 3]
    d_mean = sums[:, 4:6]
    dA = np.empty((nv, 2, 2), dtype=dt)
    dA[:, 0, 0] = sums[:, 6]
    dA[:, 0, 1] = sums[:, 7]
    dA[:, 1, 0] = sums[:, 7]
    dA[:, 1, 1] = sums[:, 8]
    GC = -inv @ dA @ inv  # d L / d cov2d (symmetric)

    # chain through cov2d = Tm Sigma Tm^T + dil I
    Rcam = ctx.camera.R.astype(dt)
    J = ctx.J_entries
    Tm = J @ Rcam
    Sigma = ctx.Sigma
    dTm = 2.0 * (GC @ Tm @ Sigma)
    dSigma = Tm.transpose(0, 2, 1) @ GC @ Tm
    dJ = dTm @ Rcam.T

    fx, fy = dt.type(ctx.camera.fx), dt.type(ctx.camera.fy)
    x, y, z = ctx.xc[:, 0], ctx.xc[:, 1], ctx.xc[:, 2]
    invz = 1.0 / z
    invz2 = invz * invz
    d_xc = np.zeros((nv, 3), dtype=dt)
    d_xc[:, 0] = dJ[:, 0, 2] * (-fx * invz2)
    d_xc[:, 1] = dJ[:, 1, 2] * (-fy * invz2)
    d_xc[:, 2] = (
        dJ[:, 0, 0] * (-fx * invz2)
        + dJ[:, 1, 1] * (-fy * invz2)
        + dJ[:, 0, 2] * (2 * fx * x * invz2 * invz)
        + dJ[:, 1, 2] * (2 * fy * y * invz2 * invz)
    )
    # screen-space mean
    d_xc[:, 0] += d_mean[:, 0] * fx * invz
    d_xc[:, 1] += d_mean[:, 1] * fy * invz
    d_xc[:, 2] += -(d_mean[:, 0] * fx * x + d_mean[:, 1] * fy * y) * invz2

    d_mu = d_xc @ Rcam  # R^T applied rowwise

    # Sigma = M3 M3^T, M3 = Rq diag(s)
    dM3 = 2.0 * (dSigma @ ctx.M3)
    dRq = dM3 * ctx.scales[:, None, :]
    ds = np.einsum("mij,mij->mj", ctx.Rq, dM3)
    d_logscale = ds * ctx.scales

    qn = ctx.qn
    wq, xq, yq, zq = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zeros = np.zeros_like(wq)
    dR_dw = 2 * np.stack(
        [zeros, -zq, yq, zq, zeros, -xq, -yq, xq, zeros], axis=-1
    ).reshape(-1, 3, 3)
    dR_dx = 2 * np.stack(
        [zeros, yq, zq, yq, -2 * xq, -wq, zq, wq, -2 * xq], axis=-1
    ).reshape(-1, 3, 3)
    dR_dy = 2 * np.stack(
        [-2 * yq, xq, wq, xq, zeros, zq, -wq, zq, -2 * yq], axis=-1
    ).reshape(-1, 3, 3)
    dR_dz = 2 * np.stack(
        [-2 * zq, -wq, xq, wq, -2 * zq, yq, xq, yq, zeros], axis=-1
    ).reshape(-1, 3, 3)
    d_qn = np.stack(
        [
            np.einsum("mij,mij->m", dRq, dR_dw),
            np.einsum("mij,mij->m", dRq, dR_dx),
            np.einsum("mij,mij->m", dRq, dR_dy),
            np.einsum("mij,mij->m", dRq, dR_dz),
        ],
        axis=-1,
    )
    # through normalization q_n = q / |q|
    d_quat = (d_qn - qn * np.einsum("mi,mi->m", d_qn, qn)[:, None]) / ctx.qnorm[:, None]

    # SH color: gate the clamp, then coefficients and view direction
    gate = (ctx.colors_raw > 0.0) & (ctx.colors_raw < 1.0)
    gc = d_colors * gate
    Kc = sh_coeff_count(ctx.sh_degree)
    d_coeffs = ctx.basis[:, :, None] * gc[:, None, :]  # m,K,3
    coeffs = ctx.gvals[ctx.valid_idx, SH_START : SH_START + 3 * Kc].reshape(-1, Kc, 3)
    bgrad = sh_basis_grad(ctx.dirs, ctx.sh_degree).astype(dt)  # m,K,3(dir)
    coeff_dot = np.einsum("mkc,mc->mk", coeffs, gc)
    d_dir = np.einsum("mk,mkd->md", coeff_dot, bgrad)
    d_vmu = (
        d_dir - ctx.dirs * np.einsum("mi,mi->m", d_dir, ctx.dirs)[:, None]
    ) / ctx.vlen[:, None]
    d_mu += d_vmu

    sub = grad[ctx.valid_idx]
    sub[:, POS] = d_mu
    sub[:, OPACITY] = d_alpha_g * ctx.alpha * (1.0 - ctx.alpha)
    sub[:, LOG_SCALE] = d_logscale
    sub[:, QUAT] = d_quat
    sub[:, SH_START : SH_START + 3 * Kc] = d_coeffs.reshape(-1, 3 * Kc)
    grad[ctx.valid_idx] = sub
    return grad


def project_gaussian(camera: Camera, g_row: np.ndarray, sh_degree: int = 1,
                     settings: RenderSettings | None = None):
    """Screen-space mean, 2x2 covariance and camera depth of one Gaussian.

    Returns (mean2d, cov2d, depth, culled); culled is True behind the camera.
    """
    settings = settings or RenderSettings()
    g_row = np.asarray(g_row, dtype=np.float64).reshape(1, -1)
    mu = g_row[:, POS]
    xc = (camera.R @ mu[0] + camera.t)
    z = float(xc[2])
    if z <= settings.near_clip:
        return np.zeros(2), np.zeros((2, 2)), z, True
    scales = np.exp(g_row[:, LOG_SCALE])
    q = g_row[:, QUAT]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    Rq = _quat_rotmats(qn)[0]
    M3 = Rq * scales[0][None, :]
    Sigma = M3 @ M3.T
    fx, fy = camera.fx, camera.fy
    J = np.array([[fx / z, 0, -fx * xc[0] / z**2], [0, fy / z, -fy * xc[1] / z**2]])
    Tm = J @ camera.R
    cov = Tm @ Sigma @ Tm.T + settings.dilation_px**2 * np.eye(2)
    mean2d = np.array(
        [fx * xc[0] / z + camera.K[0, 2], fy * xc[1] / z + camera.K[1, 2]]
    )
    return mean2d, cov, z, False


def render(gaussians: GaussianSet, camera: Camera,
           settings: RenderSettings | None = None) -> RenderedView:
    """Render one view; differentiable in the raw parameter matrix."""
    settings = settings or RenderSettings()
    g = gaussians.g
    rgb_np, alpha, depth, fctx = render_forward(
        g.values, camera, gaussians.sh_degree, settings
    )

    def vjp(up):
        return (render_backward(fctx, up),)

    rgb = T._record(rgb_np, (g,), vjp, "render")
    return RenderedView(rgb=rgb, alpha=alpha, depth=depth)


def pack_params(positions, opacity_logit, log_scales, quats, sh, sh_degree: int = 1) -> np.ndarray:
    """Assemble raw parameter rows from per-field arrays (numpy convenience)."""
    K = sh_coeff_count(sh_degree)
    parts = [
        np.asarray(positions).reshape(-1, 3),
        np.asarray(opacity_logit).reshape(-1, 1),
        np.asarray(log_scales).reshape(-1, 3),
        np.asarray(quats).reshape(-1, 4),
        np.asarray(sh).reshape(-1, 3 * K),
    ]
    return np.concatenate(parts, axis=1).astype(T.default_dtype())

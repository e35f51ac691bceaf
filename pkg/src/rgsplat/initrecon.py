"""Initial compact Gaussian reconstruction in the subsampled 3D space.

Per-view features come from a small stride-2 conv encoder; per-view depth
comes from a pluggable provider (oracle depth from the scene, or a learned
plane-sweep estimator). Depth grids at 1/s resolution unproject to a point
cloud of N * ceil(H/s) * ceil(W/s) points whose features are mixed by
alternating kNN / global attention blocks, then decoded into raw Gaussian
parameter rows anchored at the points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .geometry import (
    Camera,
    GeometryError,
    PointCloud,
    downsample_depth,
    knn,
    knn_spacing,
    merge_fragments,
    unproject,
)
from .renderer import GaussianSet, pack_params, param_width, sh_coeff_count
from .scenes import SceneSample


class ReconstructionError(RuntimeError):
    pass


@dataclass
class InitConfig:
    stride: int = 4  # subsample stride s: 2 / 4 / 8 -> 4x / 16x / 64x compression
    gaussians_per_point: int = 1
    channels: int = 64  # C1
    context_blocks: int = 6
    k: int = 16
    sh_degree: int = 1
    heads: int = 4
    direct_attention_limit: int = 512
    pe_frequencies: int = 4
    offset_bound: float = 0.05  # x scene radius
    opacity_bias: float = -2.5
    scale_factor: float = 0.5  # initial scale as a fraction of local spacing
    use_knn_context: bool = True  # ablations drop one family of blocks
    use_global_context: bool = True

    def __post_init__(self):
        if self.stride not in (2, 4, 8):
            raise ReconstructionError(f"stride must be 2, 4 or 8, got {self.stride}")
        if min(self.gaussians_per_point, self.channels, self.context_blocks, self.k) < 1:
            raise ReconstructionError("all extents must be positive")

    @property
    def compression(self) -> float:
        """Gaussian count reduction relative to one per pixel."""
        return self.stride**2 / self.gaussians_per_point

    def to_dict(self) -> dict:
        return dict(vars(self))


class FeatureEncoder(nn.Module):
    """Two stride-2 conv stages down to the 1/4-resolution feature grid."""

    def __init__(self, cfg: InitConfig, rng: np.random.Generator):
        c = cfg.channels
        self.conv1 = nn.Conv(3, 32, rng, stride=2)
        self.conv2 = nn.Conv(32, c, rng, stride=2)
        self.conv3 = nn.Conv(c, c, rng, stride=1)

    def __call__(self, images: T.Tensor) -> T.Tensor:
        n, h, w, _ = images.shape
        if h % 4 or w % 4:
            raise ReconstructionError(f"image size {h}x{w} not divisible by 4")
        x = T.relu(self.conv1(images))
        x = T.relu(self.conv2(x))
        return self.conv3(x)


class OracleDepthProvider:
    """Ground-truth depth straight from the scene sample."""

    name = "oracle"
    positions_fixed = True  # point cloud depends only on the scene

    def full_res_depth(self, sample: SceneSample):
        if sample.input_depths is None:
            raise ReconstructionError("scene carries no ground-truth depth")
        return [T.Tensor(d) for d in sample.input_depths]


def default_depth_range(sample: SceneSample) -> tuple[float, float]:
    centers = np.stack([c.center for c in sample.input_cameras])
    orbit_center = centers.mean(axis=0)
    dists = np.linalg.norm(centers - orbit_center, axis=1)
    dists = np.maximum(dists, 1e-3)
    return float(0.2 * dists.min()), float(2.5 * dists.max())


class PlaneSweepDepthProvider(nn.Module):
    """Softmax over inverse-depth candidates scored by cross-view feature agreement."""

    name = "plane_sweep"
    positions_fixed = False

    def __init__(self, rng: np.random.Generator, num_candidates: int = 16,
                 channels: int = 16, near: float | None = None, far: float | None = None):
        # 2x2 patchify convs keep the feature grid aligned with quarter-pixel
        # centers, which the warp geometry assumes
        self.conv1 = nn.Conv(3, channels, rng, ksize=2, stride=2, padding=0)
        self.conv2 = nn.Conv(channels, channels, rng, ksize=2, stride=2, padding=0)
        self.cost_scale = T.parameter(np.array(25.0))
        self.num_candidates = num_candidates
        self.near = near
        self.far = far

    def _match_features(self, images: T.Tensor) -> T.Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(images))))

    def full_res_depth(self, sample: SceneSample):
        n = sample.n_input
        if n < 2:
            raise ReconstructionError("plane sweep needs at least two input views")
        near, far = self.near, self.far
        if near is None or far is None:
            near_d, far_d = default_depth_range(sample)
            near = near if near is not None else near_d
            far = far if far is not None else far_d
        h, w = sample.input_images[0].shape[:2]
        images = T.Tensor(np.stack(sample.input_images))
        feats = self._match_features(images)  # n, hq, wq, c
        hq, wq = feats.shape[1], feats.shape[2]
        c = feats.shape[3]
        inv_cands = np.linspace(1.0 / far, 1.0 / near, self.num_candidates)
        dt = T.default_dtype()

        depths = []
        for i in range(n):
            cam_i = sample.input_cameras[i].scaled(4)
            Kinv = np.linalg.inv(cam_i.K)
            jj, ii = np.meshgrid(np.arange(wq), np.arange(hq))
            pix = np.stack([jj + 0.5, ii + 0.5, np.ones_like(jj, np.float64)], -1)
            rays = (pix.reshape(-1, 3) @ Kinv.T) @ sample.input_cameras[i].R
            center = sample.input_cameras[i].center
            f_i = T.reshape(T.getitem(feats, i), (hq * wq, c))
            cost_cols = []
            for d_inv in inv_cands:
                d = 1.0 / d_inv
                pts = center + rays * d
                acc = None
                denom = np.zeros((hq * wq, 1), dtype=dt)
                for j in range(n):
                    if j == i:
                        continue
                    cam_j = sample.input_cameras[j].scaled(4)
                    xc = pts @ cam_j.R.T + cam_j.t
                    z = np.maximum(xc[:, 2], 1e-9)
                    u = cam_j.fx * xc[:, 0] / z + cam_j.K[0, 2] - 0.5
                    v = cam_j.fy * xc[:, 1] / z + cam_j.K[1, 2] - 0.5
                    ok = (xc[:, 2] > 1e-6) & (u >= 0) & (u <= wq - 1) & (v >= 0) & (v <= hq - 1)
                    u = np.clip(u, 0, wq - 1)
                    v = np.clip(v, 0, hq - 1)
                    u0 = np.clip(np.floor(u).astype(np.int64), 0, wq - 2) if wq > 1 else np.zeros_like(u, np.int64)
                    v0 = np.clip(np.floor(v).astype(np.int64), 0, hq - 2) if hq > 1 else np.zeros_like(v, np.int64)
                    fu = (u - u0).astype(dt)[:, None]
                    fv = (v - v0).astype(dt)[:, None]
                    f_j = T.reshape(T.getitem(feats, j), (hq * wq, c))
                    idx00 = v0 * wq + u0
                    warped = (
                        T.take(f_j, idx00) * ((1 - fu) * (1 - fv))
                        + T.take(f_j, idx00 + 1) * (fu * (1 - fv))
                        + T.take(f_j, idx00 + wq) * ((1 - fu) * fv)
                        + T.take(f_j, idx00 + wq + 1) * (fu * fv)
                    )
                    mask = ok.astype(dt)[:, None]
                    sq = T.tsum(T.square((f_i - warped)) * mask, axis=1, keepdims=True)
                    acc = sq if acc is None else acc + sq
                    denom += mask
                # negative summed squared feature difference, averaged over
                # however many neighbor views actually saw the point; a
                # candidate nobody saw must score badly, not perfectly
                unseen = denom == 0
                cost = acc * T.Tensor(-1.0 / np.maximum(denom, 1.0))
                if np.any(unseen):
                    cost = cost + T.Tensor(np.where(unseen, dt.type(-1e4), dt.type(0)))
                cost_cols.append(cost)
            costs = T.concat(cost_cols, axis=1)  # hq*wq, D
            weights = T.softmax(costs * self.cost_scale, axis=-1)
            inv_depth = weights @ T.Tensor(inv_cands.astype(dt)[:, None])
            depth_q = T.Tensor(np.ones((hq * wq, 1), dtype=dt)) / inv_depth
            full = T.resize_bilinear(T.reshape(depth_q, (hq, wq, 1)), (h, w))
            depths.append(T.reshape(full, (h, w)))
        return depths


def plane_sweep_depth(images, cameras, near: float, far: float, candidates: int,
                      provider: PlaneSweepDepthProvider | None = None,
                      rng: np.random.Generator | None = None):
    """Functional wrapper: per-view depth from a (possibly fresh) estimator."""
    sample = SceneSample(
        input_cameras=list(cameras),
        input_images=[np.asarray(im, dtype=T.default_dtype()) for im in images],
        target_cameras=[],
        target_images=[],
        input_depths=None,
        radius=1.0,
        seed=0,
    )
    if provider is None:
        provider = PlaneSweepDepthProvider(
            rng or np.random.default_rng(0), num_candidates=candidates,
            near=near, far=far)
    else:
        provider.near, provider.far = near, far
        provider.num_candidates = candidates
    return provider.full_res_depth(sample)


def fourier_position_features(positions: np.ndarray, center: np.ndarray,
                              radius: float, frequencies: int) -> np.ndarray:
    """sin/cos bands of normalized coordinates, 2 * 3 * frequencies wide."""
    p = (positions - center) / max(radius, 1e-6)
    bands = []
    for i in range(frequencies):
        w = (2.0**i) * np.pi
        bands.append(np.sin(w * p))
        bands.append(np.cos(w * p))
    return np.concatenate(bands, axis=1)


class ContextAggregator(nn.Module):
    """Alternating kNN / global attention over the point cloud features."""

    def __init__(self, cfg: InitConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.pe_proj = nn.Linear(6 * cfg.pe_frequencies, c, rng, std=0.02)
        self.blocks = []
        for i in range(cfg.context_blocks):
            if i % 2 == 0:
                if cfg.use_knn_context:
                    self.blocks.append(nn.KnnBlock(c, rng, cfg.heads))
            elif cfg.use_global_context:
                self.blocks.append(
                    nn.GlobalBlock(c, rng, cfg.heads, cfg.direct_attention_limit)
                )

    def __call__(self, pc: PointCloud, knn_idx: np.ndarray, radius: float,
                 pe: np.ndarray | None = None) -> T.Tensor:
        if pc.count < self.cfg.k:
            raise ReconstructionError(
                f"point cloud of {pc.count} points is smaller than k={self.cfg.k}"
            )
        if pe is None:
            pos = pc.positions.values
            pe = fourier_position_features(pos, pos.mean(axis=0), radius,
                                           self.cfg.pe_frequencies)
        x = pc.features + self.pe_proj(T.Tensor(pe.astype(T.default_dtype())))
        for block in self.blocks:
            if isinstance(block, nn.KnnBlock):
                x = block(x, knn_idx)
            else:
                x = block(x, pc.grid_shape)
        return x


class GaussianDecoder(nn.Module):
    """Linear heads from aggregated features to raw Gaussian parameter rows."""

    def __init__(self, cfg: InitConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        gpp = cfg.gaussians_per_point
        K = sh_coeff_count(cfg.sh_degree)
        self.offset_head = nn.Linear(c, 3 * gpp, rng, std=0.01)
        self.opacity_head = nn.Linear(c, gpp, rng, std=0.01)
        self.scale_head = nn.Linear(c, 3 * gpp, rng, std=0.01)
        self.quat_head = nn.Linear(c, 4 * gpp, rng, std=0.01)
        self.sh_head = nn.Linear(c, 3 * K * gpp, rng, std=0.01)

    def __call__(self, pc: PointCloud, f_star: T.Tensor, radius: float,
                 log_spacing: np.ndarray) -> GaussianSet:
        cfg = self.cfg
        m = pc.count
        gpp = cfg.gaussians_per_point
        K = sh_coeff_count(cfg.sh_degree)
        rep = np.repeat(np.arange(m), gpp)

        def fan_out(t, width):  # m x (width*gpp) -> m*gpp x width
            return T.reshape(t, (m * gpp, width))

        delta = T.tanh(fan_out(self.offset_head(f_star), 3)) * (cfg.offset_bound * radius)
        mu = T.take(pc.positions, rep) + delta
        opacity = fan_out(self.opacity_head(f_star), 1) + cfg.opacity_bias
        spacing_col = T.Tensor(
            np.repeat(np.asarray(log_spacing, dtype=T.default_dtype()), gpp)[:, None]
        )
        log_scales = fan_out(self.scale_head(f_star), 3) + spacing_col
        quat = fan_out(self.quat_head(f_star), 4) + T.Tensor(
            np.array([1.0, 0, 0, 0], dtype=T.default_dtype())
        )
        sh = fan_out(self.sh_head(f_star), 3 * K)
        g = T.concat([mu, opacity, log_scales, quat, sh], axis=1)
        z0 = T.take(f_star, rep)
        return GaussianSet(g, z0, step=0, sh_degree=cfg.sh_degree)


class InitialReconstructor(nn.Module):
    """Stage-1 model: images + depth provider -> initial GaussianSet."""

    def __init__(self, cfg: InitConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg, rng)
        self.aggregator = ContextAggregator(cfg, rng)
        self.decoder = GaussianDecoder(cfg, rng)

    def build_point_cloud(self, sample: SceneSample, depths_full) -> PointCloud:
        cfg = self.cfg
        images = T.Tensor(np.stack(sample.input_images))
        feats = self.encoder(images)
        fragments = []
        for i, cam in enumerate(sample.input_cameras):
            dq = downsample_depth(depths_full[i], cfg.stride)
            hq, wq = dq.shape
            f_i = T.getitem(feats, i)
            if (f_i.shape[0], f_i.shape[1]) != (hq, wq):
                f_i = T.resize_bilinear(f_i, (hq, wq))
            fragments.append(unproject(cam, dq, f_i, view_index=i, stride=cfg.stride))
        return merge_fragments(fragments)

    def forward(self, sample: SceneSample, provider, cache: dict | None = None):
        """Returns (GaussianSet at t=0, PointCloud, full-res depths)."""
        depths_full = provider.full_res_depth(sample)
        pc = self.build_point_cloud(sample, depths_full)

        cached = None
        if cache is not None and provider.positions_fixed:
            cached = cache.get(id(sample))
        if cached is None:
            pos = pc.positions.values
            idx = knn(pos, self.cfg.k)
            spacing = knn_spacing(pos, idx)
            log_spacing = np.log(
                np.maximum(self.cfg.scale_factor * spacing, 1e-4 * sample.radius)
            )
            pe = fourier_position_features(
                pos, pos.mean(axis=0), sample.radius, self.cfg.pe_frequencies
            ).astype(T.default_dtype())
            cached = (idx, log_spacing, pe)
            if cache is not None and provider.positions_fixed:
                cache[id(sample)] = cached
        idx, log_spacing, pe = cached

        f_star = self.aggregator(pc, idx, sample.radius, pe)
        pc.aggregated = f_star
        gaussians = self.decoder(pc, f_star, sample.radius, log_spacing)
        return gaussians, pc, depths_full

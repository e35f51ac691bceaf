"""The recurrent update step: concatenate current Gaussian parameters,
hidden state and propagated rendering error; mix with kNN attention over the
current Gaussian positions; emit additive deltas. Weights are shared across
iterations, and the output heads start at zero so the untrained update is
exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .feedback import (
    ErrorFeatureNet,
    ErrorPropagator,
    FeedbackError,
    feature_error,
    propagate_error,
    render_inputs,
)
from .geometry import knn
from .renderer import GaussianSet, RenderSettings, param_width


@dataclass
class RecurrentConfig:
    t_max: int = 3
    blocks: int = 4
    k: int = 16
    channels: int = 64  # width of the update trunk
    heads: int = 4
    error_channels: int = 64  # C3
    # per-step delta bounds by parameter group (tanh-scaled); position is in
    # units of scene radius, the rest in raw parameter units
    position_delta_bound: float = 0.01
    opacity_delta_bound: float = 1.0
    scale_delta_bound: float = 0.3
    quat_delta_bound: float = 0.3
    sh_delta_bound: float = 0.3
    error_mode: str = "feature"
    detach_between_steps: bool = False

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class GaussianDelta:
    dg: T.Tensor  # M x C2
    dz: T.Tensor  # M x C1


class UpdateNetwork(nn.Module):
    """Four kNN-attention blocks over (g, z, e) rows; zero-initialized heads."""

    def __init__(self, cfg: RecurrentConfig, sh_degree: int, hidden_channels: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        c2 = param_width(sh_degree)
        c_in = c2 + hidden_channels + cfg.error_channels
        c = cfg.channels
        self.in_proj = nn.Linear(c_in, c, rng)
        self.blocks = [nn.KnnBlock(c, rng, cfg.heads) for _ in range(cfg.blocks)]
        self.head_g = nn.Linear(c, c2, rng, zero_init=True)
        self.head_z = nn.Linear(c, hidden_channels, rng, zero_init=True)

    def update_step(self, gaussians: GaussianSet, errors: T.Tensor,
                    scene_radius: float) -> GaussianDelta:
        m = gaussians.count
        if errors.shape[0] != m:
            raise FeedbackError(
                f"error rows {errors.shape[0]} do not align with {m} Gaussians"
            )
        idx = knn(gaussians.positions, self.cfg.k)
        x = T.concat([gaussians.g, gaussians.z, errors], axis=1)
        x = self.in_proj(x)
        for block in self.blocks:
            x = block(x, idx)
        raw_g = self.head_g(x)
        cfg = self.cfg
        dg = T.concat(
            [
                T.tanh(raw_g[:, 0:3]) * (cfg.position_delta_bound * scene_radius),
                T.tanh(raw_g[:, 3:4]) * cfg.opacity_delta_bound,
                T.tanh(raw_g[:, 4:7]) * cfg.scale_delta_bound,
                T.tanh(raw_g[:, 7:11]) * cfg.quat_delta_bound,
                T.tanh(raw_g[:, 11:]) * cfg.sh_delta_bound,
            ],
            axis=1,
        )
        dz = self.head_z(x)
        return GaussianDelta(dg=dg, dz=dz)


def apply_delta(gaussians: GaussianSet, delta: GaussianDelta) -> GaussianSet:
    """Additive update in raw parameter space; iteration index advances."""
    if delta.dg.shape != gaussians.g.shape or delta.dz.shape != gaussians.z.shape:
        raise FeedbackError(
            f"delta shapes {delta.dg.shape}/{delta.dz.shape} do not match "
            f"{gaussians.g.shape}/{gaussians.z.shape}"
        )
    return GaussianSet(
        g=gaussians.g + delta.dg,
        z=gaussians.z + delta.dz,
        step=gaussians.step + 1,
        sh_degree=gaussians.sh_degree,
    )


def run_recurrent(initial: GaussianSet, cameras, input_images, iterations: int,
                  updater: UpdateNetwork, propagator: ErrorPropagator,
                  error_net: ErrorFeatureNet, scene_radius: float,
                  settings: RenderSettings | None = None,
                  gt_features: list | None = None,
                  zero_error: bool = False) -> list[GaussianSet]:
    """Iterate render -> error -> propagate -> update; returns [G^0 .. G^T].

    Weights are shared across steps. With ``zero_error`` the propagated error
    input is replaced by zeros (the ablation switch); with
    ``detach_between_steps`` in the config, gradients stop at step borders.
    """
    cfg = updater.cfg
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    trajectory = [initial]
    current = initial
    gpp = 1
    n_points_base = current.count
    for _ in range(iterations):
        if cfg.detach_between_steps and current is not trajectory[0]:
            current = GaussianSet(current.g.detach(), current.z.detach(),
                                  current.step, current.sh_degree)
        if zero_error:
            errors = T.Tensor(
                np.zeros((current.count, cfg.error_channels), dtype=T.default_dtype())
            )
        else:
            views = render_inputs(current, cameras, settings)
            raw = feature_error([v.rgb for v in views], input_images, error_net,
                                mode=cfg.error_mode, gt_features=gt_features)
            n, hq, wq, _ = raw.shape
            gpp = max(1, current.count // (n * hq * wq))
            errors = propagate_error(raw, propagator, current.count, gpp)
        delta = updater.update_step(current, errors, scene_radius)
        current = apply_delta(current, delta)
        trajectory.append(current)
    return trajectory

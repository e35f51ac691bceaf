"""Losses, optimizer, learning-rate schedule and the two-stage training loops.

Stage 1 trains the initial reconstruction under rendering loss plus an
edge-aware depth smoothness term on the input-view depth maps. Stage 2
freezes stage 1 and trains the error propagation and update networks on
full recurrent rollouts, supervising every post-update prediction with
exponentially increasing weights.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .feedback import ErrorFeatureNet
from .metrics import PSNR_CAP_DB, psnr
from .recurrent import run_recurrent
from .renderer import RenderSettings, render


class TrainingError(RuntimeError):
    pass


@dataclass
class LossConfig:
    depth_smooth_weight: float = 0.01  # alpha
    perceptual_weight: float = 0.5  # lambda
    gamma: float = 0.9  # recurrent discount
    target_views: int = 4  # V, targets rendered per training step
    include_initial_render: bool = False  # also supervise G^0's render in stage 2

    def __post_init__(self):
        if self.depth_smooth_weight < 0 or self.perceptual_weight < 0:
            raise TrainingError("loss weights must be non-negative")
        if not (0 < self.gamma <= 1):
            raise TrainingError("gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dict(vars(self))


def l1(a: T.Tensor, b) -> T.Tensor:
    b = T.as_tensor(b)
    if a.shape != b.shape:
        raise TrainingError(f"shape mismatch: {a.shape} vs {b.shape}")
    return T.tmean(T.absolute(a - b))


def render_loss(pred: T.Tensor, gt, net: ErrorFeatureNet,
                perceptual_weight: float = 0.5,
                gt_features: T.Tensor | None = None) -> T.Tensor:
    """Mean absolute error plus weighted feature-space distance."""
    loss = l1(pred, np.asarray(gt))
    if perceptual_weight > 0:
        f_pred = net.pyramid(pred)
        f_gt = gt_features if gt_features is not None else net.pyramid(
            T.Tensor(np.asarray(gt))).detach()
        loss = loss + perceptual_weight * T.tmean(T.absolute(f_pred - f_gt))
    return loss


def depth_smooth_loss(image, depth: T.Tensor) -> T.Tensor:
    """Edge-aware smoothness: |dD| * exp(-|dI|), forward differences."""
    img = np.asarray(image, dtype=np.float64)
    dix = np.abs(np.diff(img, axis=1)).mean(axis=-1)
    diy = np.abs(np.diff(img, axis=0)).mean(axis=-1)
    wx = T.Tensor(np.exp(-dix).astype(T.default_dtype()))
    wy = T.Tensor(np.exp(-diy).astype(T.default_dtype()))
    ddx = T.absolute(depth[:, 1:] - depth[:, :-1])
    ddy = T.absolute(depth[1:, :] - depth[:-1, :])
    return T.tmean(ddx * wx) + T.tmean(ddy * wy)


def stage1_loss(rendered_targets, gt_targets, input_images, depths,
                cfg: LossConfig, net: ErrorFeatureNet,
                gt_features=None) -> T.Tensor:
    """Sum of target render losses plus weighted input depth smoothness."""
    if len(rendered_targets) == 0:
        raise TrainingError("stage-1 loss needs at least one target view")
    loss = None
    for v, (pred, gt) in enumerate(zip(rendered_targets, gt_targets)):
        gf = gt_features[v] if gt_features is not None else None
        term = render_loss(pred, gt, net, cfg.perceptual_weight, gf)
        loss = term if loss is None else loss + term
    if cfg.depth_smooth_weight > 0:
        for img, d in zip(input_images, depths):
            loss = loss + cfg.depth_smooth_weight * depth_smooth_loss(img, d)
    return loss


def stage2_weights(t_total: int, gamma: float) -> list[float]:
    return [gamma ** (t_total - 1 - t) for t in range(t_total)]


def stage2_loss(trajectory_renders, gt_targets, cfg: LossConfig,
                net: ErrorFeatureNet, gt_features=None) -> T.Tensor:
    """Discounted sum over per-iteration target render losses.

    ``trajectory_renders[t][v]`` is the render of target v after update t+1
    (plus optionally the initial render when configured upstream).
    """
    t_total = len(trajectory_renders)
    if t_total == 0:
        raise TrainingError("empty trajectory")
    weights = stage2_weights(t_total, cfg.gamma)
    loss = None
    for t, renders in enumerate(trajectory_renders):
        step_loss = None
        for v, pred in enumerate(renders):
            gf = gt_features[v] if gt_features is not None else None
            term = render_loss(pred, gt_targets[v], net, cfg.perceptual_weight, gf)
            step_loss = term if step_loss is None else step_loss + term
        loss = (
            step_loss * weights[t] if loss is None else loss + step_loss * weights[t]
        )
    return loss


class CosineSchedule:
    """Linear warmup then cosine decay to zero at ``total`` steps."""

    def __init__(self, base_lr: float, total: int, warmup_frac: float = 0.05):
        self.base_lr = base_lr
        self.total = max(total, 1)
        self.warmup = max(int(round(total * warmup_frac)), 1)

    def __call__(self, step: int) -> float:
        warm = min(step / self.warmup, 1.0)
        t_post = max(step - self.warmup, 0)
        t_den = max(self.total - self.warmup, 1)
        return self.base_lr * warm * 0.5 * (1.0 + np.cos(np.pi * t_post / t_den))


class AdamW:
    """Decoupled-weight-decay Adam; non-finite gradients skip the step."""

    def __init__(self, params: dict[str, T.Tensor] | list[T.Tensor],
                 lr: float | Callable[[int], float] = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.skipped_steps = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]

    def current_lr(self) -> float:
        return self.lr(self.step_count) if callable(self.lr) else self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False when skipped on bad gradients."""
        self.step_count += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values)
                 for p in self.params]
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            return False
        lr = self.current_lr()
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.values
            p.values -= (lr * update).astype(p.values.dtype)
        return True


@dataclass
class TrainSettings:
    steps: int = 2000
    lr: float = 2e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000
    zero_error_input: bool = False  # stage-2 ablation: feed zeros as error


class CsvLogger:
    def __init__(self, path, seed: int):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                f.write(f"# seed={seed}\n")
                csv.writer(f).writerow(["step", "stage", "loss", "psnr", "lr"])

    def log(self, step: int, stage: int, loss: float, psnr_db: float, lr: float):
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(
                    [step, stage, f"{loss:.6f}", f"{min(psnr_db, PSNR_CAP_DB):.4f}",
                     f"{lr:.8f}"]
                )


def train_stage1(dataset, model, settings: TrainSettings,
                 log_path=None, checkpoint_path=None,
                 render_settings: RenderSettings | None = None,
                 progress: Callable[[int, float, float], None] | None = None):
    """Optimize the initial reconstruction (and depth provider) in place."""
    if not dataset:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(settings.seed)
    provider = model.depth_provider()
    params = model.stage1_parameters()
    schedule = CosineSchedule(settings.lr, settings.steps, settings.warmup_frac)
    opt = AdamW(params, lr=schedule, weight_decay=settings.weight_decay)
    logger = CsvLogger(log_path, settings.seed)
    cache: dict = {}
    gt_feat_cache: dict = {}
    for step in range(1, settings.steps + 1):
        scene = dataset[int(rng.integers(len(dataset)))]
        gt_feats = _target_features(scene, model.error_net, gt_feat_cache)
        opt.zero_grad()
        try:
            with T.Tape() as tape:
                gaussians, _, depths = model.init.forward(scene, provider, cache)
                renders = [
                    render(gaussians, cam, render_settings).rgb
                    for cam in scene.target_cameras
                ]
                loss = stage1_loss(
                    renders, scene.target_images, scene.input_images, depths,
                    model.loss_cfg, model.error_net, gt_feats,
                )
            T.backward(tape, loss)
        except FloatingPointError:
            opt.skipped_steps += 1
            continue
        opt.step()
        value = loss.item()
        quality = psnr(np.clip(renders[0].values, 0, 1), scene.target_images[0])
        if step % settings.log_every == 0 or step == settings.steps:
            logger.log(step, 1, value, quality, opt.current_lr())
        if progress is not None:
            progress(step, value, quality)
        model.step = step
        if checkpoint_path and (
            step % settings.checkpoint_every == 0 or step == settings.steps
        ):
            model.save(checkpoint_path)
    return model


def _target_features(scene, net, cache):
    key = id(scene)
    if key not in cache:
        cache[key] = [
            net.pyramid(T.Tensor(np.asarray(img))).detach()
            for img in scene.target_images
        ]
    return cache[key]


def _input_features(scene, net, cache):
    key = id(scene)
    if key not in cache:
        cache[key] = [
            net.pyramid(T.Tensor(np.asarray(img))).detach()
            for img in scene.input_images
        ]
    return cache[key]


def train_stage2(dataset, model, settings: TrainSettings,
                 log_path=None, checkpoint_path=None,
                 render_settings: RenderSettings | None = None,
                 progress: Callable[[int, float, float], None] | None = None):
    """Freeze stage 1; train error propagation and the update network."""
    if not dataset:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(settings.seed)
    model.freeze_stage1()
    params = model.stage2_parameters()
    schedule = CosineSchedule(settings.lr, settings.steps, settings.warmup_frac)
    opt = AdamW(params, lr=schedule, weight_decay=settings.weight_decay)
    logger = CsvLogger(log_path, settings.seed)
    t_max = model.recurrent_cfg.t_max

    # stage 1 is frozen and the oracle point cloud is scene-determined, so
    # the initialization can be computed once per scene
    init_cache: dict = {}
    gt_feat_cache: dict = {}
    in_feat_cache: dict = {}
    provider = model.depth_provider()

    def initial_for(scene):
        key = id(scene)
        if key not in init_cache:
            gaussians, _, _ = model.init.forward(scene, provider, None)
            init_cache[key] = (
                gaussians.g.values.copy(), gaussians.z.values.copy(),
                gaussians.sh_degree,
            )
        g, z, deg = init_cache[key]
        from .renderer import GaussianSet

        return GaussianSet(T.Tensor(g.copy()), T.Tensor(z.copy()), 0, deg)

    for step in range(1, settings.steps + 1):
        scene = dataset[int(rng.integers(len(dataset)))]
        t_iters = int(rng.integers(1, t_max + 1))
        gt_feats = _target_features(scene, model.error_net, gt_feat_cache)
        in_feats = (
            None
            if model.recurrent_cfg.error_mode != "feature"
            else _input_features(scene, model.error_net, in_feat_cache)
        )
        opt.zero_grad()
        try:
            with T.Tape() as tape:
                initial = initial_for(scene)
                trajectory = run_recurrent(
                    initial, scene.input_cameras, scene.input_images, t_iters,
                    model.updater, model.propagator, model.error_net, scene.radius,
                    settings=render_settings, gt_features=in_feats,
                    zero_error=settings.zero_error_input,
                )
                supervised = trajectory if model.loss_cfg.include_initial_render else trajectory[1:]
                step_renders = [
                    [render(g, cam, render_settings).rgb for cam in scene.target_cameras]
                    for g in supervised
                ]
                loss = stage2_loss(step_renders, scene.target_images, model.loss_cfg,
                                   model.error_net, gt_feats)
            T.backward(tape, loss)
        except FloatingPointError:
            opt.skipped_steps += 1
            continue
        opt.step()
        value = loss.item()
        quality = psnr(np.clip(step_renders[-1][0].values, 0, 1),
                       scene.target_images[0])
        if step % settings.log_every == 0 or step == settings.steps:
            logger.log(step, 2, value, quality, opt.current_lr())
        if progress is not None:
            progress(step, value, quality)
        model.step = step
        if checkpoint_path and (
            step % settings.checkpoint_every == 0 or step == settings.steps
        ):
            model.save(checkpoint_path)
    return model


def sample_iteration_counts(rng: np.random.Generator, n: int, t_max: int = 3):
    """The stage-2 iteration sampler, exposed for its uniformity contract."""
    return rng.integers(1, t_max + 1, size=n)

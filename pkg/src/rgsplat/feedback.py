"""Rendering-error feedback: compare rendered input views against ground
truth in a frozen multi-scale feature space and propagate the per-pixel
errors to per-Gaussian vectors with global attention.

The feature net is a fixed, seeded, orthogonally-initialized conv pyramid
(stages at 1/2, 1/4, 1/8 resolution, widths 16/24/24, concatenated to 64
channels at 1/4 resolution). Its weights never train; gradients flow through
it into the rendered branch only.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .geometry import Camera
from .renderer import GaussianSet, RenderSettings, RenderedView, render

ERROR_NET_SEED = 2417
FEATURE_CHANNELS = 64  # C3 = 16 + 24 + 24


class FeedbackError(RuntimeError):
    pass


class ErrorFeatureNet(nn.Module):
    """Frozen three-stage pyramid; identical inputs give identical features."""

    widths = (16, 24, 24)

    def __init__(self):
        rng = np.random.default_rng(ERROR_NET_SEED)
        c1, c2, c3 = self.widths

        def frozen_conv(cin, cout):
            conv = nn.Conv(cin, cout, rng)
            conv.w = T.Tensor(nn.orthogonal_init(rng, (3, 3, cin, cout))
                              * np.sqrt(2.0), requires_grad=False)
            conv.b = T.Tensor(np.zeros(cout), requires_grad=False)
            return conv

        self.conv1 = frozen_conv(3, c1)
        self.conv2 = frozen_conv(c1, c2)
        self.conv3 = frozen_conv(c2, c3)
        for conv in (self.conv1, self.conv2, self.conv3):
            conv.stride = 2

    def pyramid(self, image: T.Tensor) -> T.Tensor:
        """[H, W, 3] -> [H/4, W/4, C3] multi-scale features."""
        h, w = image.shape[0], image.shape[1]
        x = T.reshape(image, (1, h, w, 3))
        s1 = T.relu(self.conv1(x))
        s2 = T.relu(self.conv2(s1))
        s3 = T.relu(self.conv3(s2))
        hq, wq = s2.shape[1], s2.shape[2]
        f1 = T.resize_bilinear(s1, (hq, wq))
        f3 = T.resize_bilinear(s3, (hq, wq))
        out = T.concat([f1, s2, f3], axis=3)
        return T.reshape(out, (hq, wq, FEATURE_CHANNELS))


def render_inputs(gaussians: GaussianSet, cameras: list[Camera],
                  settings: RenderSettings | None = None) -> list[RenderedView]:
    """Render every input view from the current Gaussians."""
    return [render(gaussians, cam, settings) for cam in cameras]


def feature_error(rendered: list[T.Tensor], gt_images: list[np.ndarray],
                  net: ErrorFeatureNet, mode: str = "feature",
                  gt_features: list[T.Tensor] | None = None) -> T.Tensor:
    """Per-pixel error stack, (N, H/4, W/4, C3); exactly zero on equal inputs.

    ``mode="feature"`` subtracts frozen pyramid features; ``mode="rgb"``
    subtracts quarter-resolution RGB (C3 = 3). The ground-truth branch is
    constant; only the rendered branch carries gradients.
    """
    if len(rendered) != len(gt_images):
        raise FeedbackError(
            f"got {len(rendered)} renders but {len(gt_images)} ground-truth views"
        )
    per_view = []
    for i, (ren, gt) in enumerate(zip(rendered, gt_images)):
        if tuple(ren.shape[:2]) != tuple(np.asarray(gt).shape[:2]):
            raise FeedbackError(
                f"view {i}: rendered {ren.shape[:2]} vs ground truth "
                f"{np.asarray(gt).shape[:2]}"
            )
        h, w = ren.shape[0], ren.shape[1]
        if mode == "feature":
            f_hat = net.pyramid(ren)
            if gt_features is not None:
                f_ref = gt_features[i]
            else:
                f_ref = net.pyramid(T.Tensor(np.asarray(gt))).detach()
            diff = f_hat - f_ref
        elif mode == "rgb":
            hq, wq = h // 4, w // 4
            r4 = T.resize_bilinear(ren, (hq, wq))
            g4 = T.resize_bilinear(T.Tensor(np.asarray(gt)), (hq, wq)).detach()
            diff = r4 - g4
        else:
            raise FeedbackError(f"unknown error mode {mode!r}")
        hq, wq, c = diff.shape
        per_view.append(T.reshape(diff, (1, hq, wq, c)))
    return T.concat(per_view, axis=0)


class ErrorPropagator(nn.Module):
    """Two global-attention blocks over all per-pixel errors, read out in
    point order so error j lines up with Gaussian j."""

    def __init__(self, channels: int, rng: np.random.Generator, heads: int = 4,
                 direct_limit: int = 512, blocks: int = 2):
        self.blocks = [
            nn.GlobalBlock(channels, rng, heads, direct_limit) for _ in range(blocks)
        ]

    def __call__(self, errors: T.Tensor, gaussians_per_point: int = 1) -> T.Tensor:
        n, hq, wq, c = errors.shape
        x = T.reshape(errors, (n * hq * wq, c))
        for block in self.blocks:
            x = block(x, (n, hq, wq))
        if gaussians_per_point > 1:
            x = T.take(x, np.repeat(np.arange(n * hq * wq), gaussians_per_point))
        return x


def propagate_error(errors: T.Tensor, propagator: ErrorPropagator,
                    expected_points: int, gaussians_per_point: int = 1) -> T.Tensor:
    """Spec surface with the alignment check: raw error count must equal the
    point count (s = 4), each Gaussian j receiving globally mixed error j."""
    n, hq, wq, _ = errors.shape
    if n * hq * wq * gaussians_per_point != expected_points:
        raise FeedbackError(
            f"error grid {n}x{hq}x{wq} (x{gaussians_per_point}) does not align "
            f"with {expected_points} Gaussians; feedback requires stride 4"
        )
    return propagator(errors, gaussians_per_point)

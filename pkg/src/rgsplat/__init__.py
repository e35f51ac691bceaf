"""Recurrent Gaussian splatting at desk scale.

A compact feed-forward reconstruction predicts Gaussians in a subsampled 3D
space; a weight-sharing recurrent network then refines them from the
rendering error of the input views. Everything runs on a from-scratch
reverse-mode tensor engine and a differentiable CPU rasterizer.
"""

from .geometry import Camera, PointCloud, knn
from .initrecon import InitConfig, InitialReconstructor, OracleDepthProvider, PlaneSweepDepthProvider
from .metrics import psnr, ssim
from .model import ModelParams
from .recurrent import RecurrentConfig, apply_delta, run_recurrent
from .renderer import GaussianSet, RenderSettings, RenderedView, render
from .scenes import SceneSample, SceneSpec, gen_scene, load_scene_dir, save_scene_dir
from .training import LossConfig, TrainSettings, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "GaussianSet",
    "InitConfig",
    "InitialReconstructor",
    "LossConfig",
    "ModelParams",
    "OracleDepthProvider",
    "PlaneSweepDepthProvider",
    "PointCloud",
    "RecurrentConfig",
    "RenderSettings",
    "RenderedView",
    "SceneSample",
    "SceneSpec",
    "TrainSettings",
    "apply_delta",
    "gen_scene",
    "knn",
    "load_scene_dir",
    "psnr",
    "render",
    "run_recurrent",
    "save_scene_dir",
    "ssim",
    "train_stage1",
    "train_stage2",
    "__version__",
]

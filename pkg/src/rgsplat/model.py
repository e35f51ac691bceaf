"""The full model bundle: configs plus every network, with (de)serialization.

Construction from (configs, seed) is deterministic, so a checkpoint needs
only the configs and the parameter blobs to rebuild an identical model.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .feedback import ErrorFeatureNet, ErrorPropagator
from .initrecon import (
    InitConfig,
    InitialReconstructor,
    OracleDepthProvider,
    PlaneSweepDepthProvider,
)
from .recurrent import RecurrentConfig, UpdateNetwork
from .training import LossConfig


class ModelParams:
    """All learnable weights of the initial and recurrent networks."""

    def __init__(self, init_cfg: InitConfig | None = None,
                 recurrent_cfg: RecurrentConfig | None = None,
                 loss_cfg: LossConfig | None = None, seed: int = 0,
                 depth_provider: str = "oracle"):
        self.init_cfg = init_cfg or InitConfig()
        self.recurrent_cfg = recurrent_cfg or RecurrentConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.seed = seed
        self.depth_provider_name = depth_provider
        self.step = 0
        if self.recurrent_cfg.error_mode == "rgb":
            self.recurrent_cfg.error_channels = 3

        rng = np.random.default_rng(seed)
        self.init = InitialReconstructor(self.init_cfg, rng)
        self.plane_sweep = PlaneSweepDepthProvider(rng)
        self.error_net = ErrorFeatureNet()
        prop_heads = (
            self.recurrent_cfg.heads
            if self.recurrent_cfg.error_channels % self.recurrent_cfg.heads == 0
            else 1
        )
        self.propagator = ErrorPropagator(
            self.recurrent_cfg.error_channels, rng, prop_heads,
            self.init_cfg.direct_attention_limit,
        )
        self.updater = UpdateNetwork(
            self.recurrent_cfg, self.init_cfg.sh_degree, self.init_cfg.channels, rng
        )

    # --- parameter groups -------------------------------------------------

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        out.update(self.init.named_parameters("init."))
        out.update(self.plane_sweep.named_parameters("plane_sweep."))
        out.update(self.propagator.named_parameters("propagator."))
        out.update(self.updater.named_parameters("updater."))
        return out

    def stage1_parameters(self) -> dict[str, T.Tensor]:
        out = self.init.named_parameters("init.")
        if self.depth_provider_name == "plane_sweep":
            out.update(self.plane_sweep.named_parameters("plane_sweep."))
        return out

    def stage2_parameters(self) -> dict[str, T.Tensor]:
        out = self.propagator.named_parameters("propagator.")
        out.update(self.updater.named_parameters("updater."))
        return out

    def freeze_stage1(self) -> None:
        for p in self.init.named_parameters().values():
            p.requires_grad = False
            p.grad = None
        for p in self.plane_sweep.named_parameters().values():
            p.requires_grad = False
            p.grad = None

    def depth_provider(self):
        if self.depth_provider_name == "oracle":
            return OracleDepthProvider()
        if self.depth_provider_name == "plane_sweep":
            return self.plane_sweep
        raise ValueError(f"unknown depth provider {self.depth_provider_name!r}")

    # --- persistence -------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "step": self.step,
            "seed": self.seed,
            "depth_provider": self.depth_provider_name,
            "init_config": self.init_cfg.to_dict(),
            "recurrent_config": self.recurrent_cfg.to_dict(),
            "loss_config": self.loss_cfg.to_dict(),
        }
        arrays = {k: v.values for k, v in self.named_parameters().items()}
        # the frozen error net rides along so files are self-contained
        arrays.update(
            {f"error_net.{k}": v.values
             for k, v in _frozen_params(self.error_net).items()}
        )
        ckpt.write_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "ModelParams":
        header, arrays = ckpt.read_checkpoint(path)
        model = cls(
            init_cfg=InitConfig(**header["init_config"]),
            recurrent_cfg=RecurrentConfig(**header["recurrent_config"]),
            loss_cfg=LossConfig(**header["loss_config"]),
            seed=header["seed"],
            depth_provider=header["depth_provider"],
        )
        model.step = header["step"]
        named = model.named_parameters()
        for name, tensor in named.items():
            if name not in arrays:
                raise ckpt.CheckpointError(f"checkpoint is missing parameter {name}")
            arr = arrays[name]
            if tuple(arr.shape) != tensor.shape:
                raise ckpt.CheckpointError(
                    f"{name}: checkpoint shape {arr.shape} != model {tensor.shape}"
                )
            tensor.values = arr.astype(T.default_dtype())
        for name, tensor in _frozen_params(model.error_net).items():
            key = f"error_net.{name}"
            if key in arrays:
                tensor.values = arrays[key].astype(T.default_dtype())
        return model


def _frozen_params(net: ErrorFeatureNet) -> dict[str, T.Tensor]:
    out = {}
    for i, conv in enumerate((net.conv1, net.conv2, net.conv3), start=1):
        out[f"conv{i}.w"] = conv.w
        out[f"conv{i}.b"] = conv.b
    return out

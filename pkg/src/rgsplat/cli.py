"""Command-line surface.

Subcommands: gen-data, train-init, train-recurrent, infer, eval, render.
Configuration precedence is CLI flags over a JSON config file over built-in
defaults; every run is reproducible from its seed, and every CSV starts with
a `# seed=N` line. CSV schemas are documented in docs/csv_schemas.md.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .initrecon import InitConfig, OracleDepthProvider
from .metrics import PSNR_CAP_DB, psnr, ssim
from .model import ModelParams
from .plyio import export_ply, load_ply
from .recurrent import RecurrentConfig, run_recurrent
from .renderer import GaussianSet, render
from .scenes import SceneSpec, gen_scene, load_scene_dir, save_scene_dir, _save_image
from .training import LossConfig, TrainSettings, train_stage1, train_stage2


class CliError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass  # single-threaded numpy is the common case here anyway


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {path} does not exist")
    return json.loads(p.read_text())


def _build_configs(args, file_cfg: dict):
    init_kw = dict(file_cfg.get("init", {}))
    rec_kw = dict(file_cfg.get("recurrent", {}))
    loss_kw = dict(file_cfg.get("loss", {}))
    if getattr(args, "stride", None) is not None:
        init_kw["stride"] = args.stride
    if getattr(args, "channels", None) is not None:
        init_kw["channels"] = args.channels
    if getattr(args, "error_mode", None) is not None:
        rec_kw["error_mode"] = args.error_mode
    return InitConfig(**init_kw), RecurrentConfig(**rec_kw), LossConfig(**loss_kw)


def _train_settings(args) -> TrainSettings:
    return TrainSettings(
        steps=args.steps,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
        zero_error_input=getattr(args, "zero_error_input", False),
    )


def _load_dataset(data_dir: str):
    root = Path(data_dir)
    if not root.exists():
        raise CliError(f"dataset directory {data_dir} does not exist")
    scene_dirs = sorted(p for p in root.iterdir() if (p / "cameras.json").exists())
    if not scene_dirs:
        raise CliError(f"no scene directories under {data_dir}")
    return [load_scene_dir(p) for p in scene_dirs]


def cmd_gen_data(args) -> int:
    spec = SceneSpec(
        num_gt_gaussians=args.gt_gaussians,
        n_input=args.input_views,
        n_target=args.target_views,
        height=args.height,
        width=args.width,
        orbit_radius=args.orbit_radius,
        fov_deg=args.fov,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        sample = gen_scene(args.seed + i, spec)
        save_scene_dir(sample, out / f"scene_{i:04d}")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_train_init(args) -> int:
    init_cfg, rec_cfg, loss_cfg = _build_configs(args, _load_config_file(args.config))
    dataset = _load_dataset(args.data_dir)
    model = ModelParams(init_cfg, rec_cfg, loss_cfg, seed=args.seed,
                        depth_provider=args.depth_provider)
    settings = _train_settings(args)
    log_path = args.log or (Path(args.out_checkpoint).with_suffix(".stage1.csv"))
    train_stage1(dataset, model, settings, log_path=log_path,
                 checkpoint_path=args.out_checkpoint)
    model.save(args.out_checkpoint)
    print(f"stage-1 checkpoint written to {args.out_checkpoint}")
    return 0


def cmd_train_recurrent(args) -> int:
    model = ModelParams.load(args.init_checkpoint)
    if args.error_mode is not None and args.error_mode != model.recurrent_cfg.error_mode:
        raise CliError(
            "error mode is fixed at stage-1 time; retrain or omit --error-mode"
        )
    dataset = _load_dataset(args.data_dir)
    if args.detach_between_steps:
        model.recurrent_cfg.detach_between_steps = True
    settings = _train_settings(args)
    log_path = args.log or (Path(args.out_checkpoint).with_suffix(".stage2.csv"))
    train_stage2(dataset, model, settings, log_path=log_path,
                 checkpoint_path=args.out_checkpoint)
    model.save(args.out_checkpoint)
    print(f"stage-2 checkpoint written to {args.out_checkpoint}")
    return 0


def _reconstruct_trajectory(model: ModelParams, sample, iterations: int):
    provider = model.depth_provider()
    t0 = time.monotonic()
    initial, _, _ = model.init.forward(sample, provider, None)
    trajectory = run_recurrent(
        initial, sample.input_cameras, sample.input_images, iterations,
        model.updater, model.propagator, model.error_net, sample.radius,
    )
    recon_time = time.monotonic() - t0
    return trajectory, recon_time


def cmd_infer(args) -> int:
    model = ModelParams.load(args.checkpoint)
    sample = load_scene_dir(args.scene_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trajectory, recon_time = _reconstruct_trajectory(model, sample, args.iterations)
    rows = []
    for t, gaussians in enumerate(trajectory):
        export_ply(gaussians, out / f"gaussians_t{t}.ply")
        for v, (cam, gt) in enumerate(zip(sample.target_cameras, sample.target_images)):
            view = render(gaussians.detached(), cam)
            img = np.clip(view.rgb.values, 0, 1)
            _save_image(out / f"render_t{t}_view{v}.png", img)
            rows.append(
                {
                    "iteration": t,
                    "view": v,
                    "psnr": min(psnr(img, gt), PSNR_CAP_DB),
                    "ssim": ssim(img, gt),
                }
            )
    with open(out / "metrics.csv", "w", newline="") as f:
        f.write(f"# seed={args.seed}\n")
        writer = csv.DictWriter(f, fieldnames=["iteration", "view", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"inference outputs in {out} (reconstruction {recon_time:.2f}s)")
    return 0


def cmd_eval(args) -> int:
    model = ModelParams.load(args.checkpoint) if args.checkpoint else None
    out_rows = []
    for scene_dir in args.scene_dirs:
        sample = load_scene_dir(scene_dir)
        if args.oracle_gaussians:
            trajectory = [sample.gt_gaussians()]
            recon_time = 0.0
        else:
            if model is None:
                raise CliError("--checkpoint required unless --oracle-gaussians")
            trajectory, recon_time = _reconstruct_trajectory(
                model, sample, args.iterations
            )
        for t, gaussians in enumerate(trajectory):
            per_view = []
            render_time = 0.0
            for cam, gt in zip(sample.target_cameras, sample.target_images):
                t0 = time.monotonic()
                view = render(gaussians.detached(), cam)
                render_time += time.monotonic() - t0
                img = np.clip(view.rgb.values, 0, 1)
                per_view.append((min(psnr(img, gt), PSNR_CAP_DB), ssim(img, gt)))
            out_rows.append(
                {
                    "scene": str(scene_dir),
                    "iteration": t,
                    "psnr": float(np.mean([p for p, _ in per_view])),
                    "ssim": float(np.mean([s for _, s in per_view])),
                    "gaussians": gaussians.count,
                    "recon_time_s": round(recon_time, 4),
                    "render_time_s": round(render_time / max(len(per_view), 1), 6),
                }
            )
    writer_target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer_target.write(f"# seed={args.seed}\n")
        writer = csv.DictWriter(
            writer_target,
            fieldnames=["scene", "iteration", "psnr", "ssim", "gaussians",
                        "recon_time_s", "render_time_s"],
        )
        writer.writeheader()
        writer.writerows(out_rows)
    finally:
        if args.out:
            writer_target.close()
    return 0


def cmd_render(args) -> int:
    source = Path(args.gaussians)
    if not source.exists():
        raise CliError(f"{source} does not exist")
    if source.suffix == ".ply":
        gaussians = load_ply(source)
    else:
        raise CliError("render expects a .ply file of Gaussians")
    meta = json.loads(Path(args.cameras).read_text())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .geometry import Camera

    for i, view in enumerate(meta["views"]):
        K = np.array(
            [[view["fx"], 0, view["cx"]], [0, view["fy"], view["cy"]], [0, 0, 1.0]]
        )
        cam = Camera(K, np.asarray(view["R"]).reshape(3, 3), np.asarray(view["t"]),
                     width=view["width"], height=view["height"])
        rendered = render(gaussians, cam)
        img = np.clip(rendered.rgb.values, 0, 1)
        np.save(out / f"render_{i:03d}.npy", img.astype(np.float32))
        _save_image(out / f"render_{i:03d}.png", img)
    print(f"rendered {len(meta['views'])} views to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgsplat",
        description="Recurrent Gaussian splatting at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap; 1 for fully deterministic runs")

    p = sub.add_parser("gen-data", help="generate synthetic scene directories")
    common(p)
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--gt-gaussians", type=int, default=400)
    p.add_argument("--input-views", type=int, default=4)
    p.add_argument("--target-views", type=int, default=2)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--orbit-radius", type=float, default=2.8)
    p.add_argument("--fov", type=float, default=55.0, help="field of view, degrees")
    p.set_defaults(fn=cmd_gen_data)

    def train_common(p):
        common(p)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--steps", type=int, default=2000)
        p.add_argument("--lr", type=float, default=2e-4)
        p.add_argument("--weight-decay", type=float, default=0.01)
        p.add_argument("--log", default=None, help="CSV loss log path")
        p.add_argument("--log-every", type=int, default=10)
        p.add_argument("--checkpoint-every", type=int, default=1000)
        p.add_argument("--error-mode", choices=["feature", "rgb"], default=None)

    p = sub.add_parser("train-init", help="stage 1: initial reconstruction")
    train_common(p)
    p.add_argument("data_dir")
    p.add_argument("out_checkpoint")
    p.add_argument("--stride", type=int, choices=[2, 4, 8], default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--depth-provider", choices=["oracle", "plane_sweep"],
                   default="oracle")
    p.set_defaults(fn=cmd_train_init)

    p = sub.add_parser("train-recurrent", help="stage 2: recurrent refinement")
    train_common(p)
    p.add_argument("data_dir")
    p.add_argument("init_checkpoint")
    p.add_argument("out_checkpoint")
    p.add_argument("--zero-error-input", action="store_true",
                   help="ablation: feed zeros instead of rendering error")
    p.add_argument("--detach-between-steps", action="store_true",
                   help="ablation: stop gradients at iteration borders")
    p.set_defaults(fn=cmd_train_recurrent)

    p = sub.add_parser("infer", help="reconstruct one scene, write PLYs and renders")
    common(p)
    p.add_argument("scene_dir")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--iterations", type=int, default=3)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="per-scene, per-iteration metrics CSV")
    common(p)
    p.add_argument("scene_dirs", nargs="+")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--oracle-gaussians", action="store_true",
                   help="debug upper bound: render stored ground-truth Gaussians")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="pure rendering of a PLY through cameras.json")
    common(p)
    p.add_argument("gaussians", help="PLY file of Gaussians")
    p.add_argument("cameras", help="cameras.json")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    np.random.seed(args.seed)  # belt and braces; all code paths take explicit rngs
    try:
        return args.fn(args)
    except CliError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

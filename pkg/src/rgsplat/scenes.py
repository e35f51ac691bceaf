"""Synthetic scene generation and dataset I/O.

Ground truth is itself a Gaussian scene: surfel-style Gaussians scattered on
simple geometry (planes, spheres, boxes) rendered with the same rasterizer
that the models train against, so perfect reconstruction is well defined and
ground-truth depth falls out of the expected-depth channel.

Directory format: ``cameras.json`` (intrinsics as fx/fy/cx/cy, row-major R,
t, per-view role), 8-bit PNG (or binary PPM) images, optional little-endian
PFM depth per input view, and ``gt_gaussians.npz`` with the generating
Gaussians when the scene is synthetic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import tensor as T
from .geometry import Camera
from .renderer import GaussianSet, RenderSettings, pack_params, render_forward, sh_coeff_count


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    num_gt_gaussians: int = 400
    n_input: int = 4
    n_target: int = 2
    height: int = 64
    width: int = 96
    orbit_radius: float = 2.8
    fov_deg: float = 55.0
    sh_degree: int = 1
    num_shapes: tuple[int, int] = (2, 4)

    def validate(self):
        if self.n_input < 1 or self.n_target < 1:
            raise SceneError("need at least one input and one target view")
        if self.num_gt_gaussians < 1:
            raise SceneError("need at least one ground-truth Gaussian")


@dataclass
class SceneSample:
    input_cameras: list[Camera]
    input_images: list[np.ndarray]  # H x W x 3 in [0, 1]
    target_cameras: list[Camera]
    target_images: list[np.ndarray]
    input_depths: Optional[list[np.ndarray]]  # H x W, scene units
    radius: float
    seed: int
    gt_g: Optional[np.ndarray] = None  # generating Gaussian rows, when synthetic
    gt_sh_degree: int = 1

    def __post_init__(self):
        shapes = {im.shape for im in self.input_images + self.target_images}
        if len(shapes) > 1:
            raise SceneError(f"views disagree on image shape: {shapes}")

    @property
    def n_input(self) -> int:
        return len(self.input_cameras)

    @property
    def n_target(self) -> int:
        return len(self.target_cameras)

    def gt_gaussians(self) -> GaussianSet:
        """The generating Gaussians as a renderable set (debug oracle path)."""
        if self.gt_g is None:
            raise SceneError("scene carries no ground-truth Gaussians")
        g = np.asarray(self.gt_g, dtype=T.default_dtype())
        return GaussianSet(T.Tensor(g), T.Tensor(np.zeros((g.shape[0], 1))),
                           sh_degree=self.gt_sh_degree)


def _quat_from_z_to(n: np.ndarray) -> np.ndarray:
    """Quaternion rotating +z onto the unit vector n."""
    z = np.array([0.0, 0.0, 1.0])
    d = float(np.dot(z, n))
    if d < -0.999999:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, n)
    q = np.array([1.0 + d, axis[0], axis[1], axis[2]])
    return q / np.linalg.norm(q)


def _sample_surfels(rng: np.random.Generator, spec: SceneSpec):
    n_shapes = int(rng.integers(spec.num_shapes[0], spec.num_shapes[1] + 1))
    counts = np.full(n_shapes, spec.num_gt_gaussians // n_shapes)
    counts[: spec.num_gt_gaussians % n_shapes] += 1
    pos, normal, tangent_scale, color = [], [], [], []
    for count in counts:
        kind = rng.choice(["plane", "sphere", "box"])
        center = rng.uniform(-0.5, 0.5, 3)
        size = rng.uniform(0.35, 0.8)
        base = rng.uniform(0.15, 0.85, 3)
        spacing = 2.0 * size / np.sqrt(max(count, 1))
        if kind == "plane":
            n = rng.normal(0, 1, 3)
            n /= np.linalg.norm(n)
            t1 = np.cross(n, [0.0, 1.0, 0.1])
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(n, t1)
            uv = rng.uniform(-1, 1, (count, 2)) * size
            p = center + uv[:, :1] * t1 + uv[:, 1:] * t2
            nn = np.tile(n, (count, 1))
        elif kind == "sphere":
            d = rng.normal(0, 1, (count, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            p = center + size * 0.7 * d
            nn = d
        else:  # box
            half = size * rng.uniform(0.4, 0.9, 3)
            face = rng.integers(0, 6, count)
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            p = rng.uniform(-1, 1, (count, 3)) * half
            nn = np.zeros((count, 3))
            p[np.arange(count), axis] = sign * half[axis]
            nn[np.arange(count), axis] = sign
            p = p + center
        pos.append(p)
        normal.append(nn)
        tangent_scale.append(np.full(count, spacing) * rng.uniform(0.7, 1.4, count))
        color.append(np.clip(base + rng.normal(0, 0.08, (count, 3)), 0.05, 0.95))
    return (np.concatenate(pos), np.concatenate(normal),
            np.concatenate(tangent_scale), np.concatenate(color))


def _orbit_camera(eye, target, K, width, height) -> Camera:
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, fwd)) > 0.98:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    return Camera(K, R, t, width=width, height=height)


def gen_scene(seed: int, spec: SceneSpec) -> SceneSample:
    """Deterministically generate one synthetic sample from its seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    pos, normal, tangent, color = _sample_surfels(rng, spec)
    m = pos.shape[0]
    K = sh_coeff_count(spec.sh_degree)
    sh = np.zeros((m, K, 3))
    sh[:, 0, :] = (color - 0.5) / 0.28209479177387814
    if K > 1:
        sh[:, 1:, :] = rng.normal(0, 0.04, (m, K - 1, 3))
    quats = np.stack([_quat_from_z_to(n) for n in normal])
    log_scales = np.log(
        np.stack([tangent, tangent, tangent * 0.15], axis=-1).clip(1e-4)
    )
    opacity = rng.uniform(1.0, 3.0, m)
    gvals = pack_params(pos, opacity, log_scales, quats, sh.reshape(m, -1),
                        spec.sh_degree)

    centroid = pos.mean(axis=0)
    radius = float(max(np.linalg.norm(pos - centroid, axis=1).max(), 0.25))

    n_total = spec.n_input + spec.n_target
    f = 0.5 * spec.width / np.tan(np.deg2rad(spec.fov_deg) / 2)
    Kmat = np.array([[f, 0, spec.width / 2], [0, f, spec.height / 2], [0, 0, 1.0]])
    target_idx = set(
        int(round(i * n_total / spec.n_target)) % n_total for i in range(spec.n_target)
    )
    while len(target_idx) < spec.n_target:  # guard collisions from rounding
        target_idx.add(int(rng.integers(0, n_total)))

    settings = RenderSettings()
    in_cams, in_imgs, in_depths = [], [], []
    tg_cams, tg_imgs = [], []
    for i in range(n_total):
        az = 2 * np.pi * i / n_total + rng.uniform(-0.12, 0.12)
        el = rng.uniform(-0.35, 0.45)
        rad = spec.orbit_radius * (1 + rng.uniform(-0.1, 0.1)) * max(radius, 0.5)
        eye = centroid + rad * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
        )
        cam = _orbit_camera(eye, centroid + rng.uniform(-0.05, 0.05, 3), Kmat,
                            spec.width, spec.height)
        rgb, alpha, depth, _ = render_forward(
            gvals.astype(T.default_dtype()), cam, spec.sh_degree, settings
        )
        if i in target_idx:
            tg_cams.append(cam)
            tg_imgs.append(rgb)
        else:
            in_cams.append(cam)
            in_imgs.append(rgb)
            fallback = float(np.linalg.norm(eye - centroid))
            d = np.where(alpha > 0.05, depth / np.maximum(alpha, 1e-6), fallback)
            in_depths.append(np.maximum(d, 1e-4).astype(rgb.dtype))
    return SceneSample(
        input_cameras=in_cams,
        input_images=in_imgs,
        target_cameras=tg_cams,
        target_images=tg_imgs,
        input_depths=in_depths,
        radius=radius,
        seed=seed,
        gt_g=gvals,
        gt_sh_degree=spec.sh_degree,
    )


# ---------------------------------------------------------------------------
# PFM depth maps (little-endian, bottom-up raster per the format)
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise SceneError(f"PFM writer expects H x W, got {data.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise SceneError(f"{path}: not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise SceneError(f"{path}: truncated PFM payload")
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=dt).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def _save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.astype(T.default_dtype())


def save_scene_dir(sample: SceneSample, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    views = []
    idx = 0
    for role, cams, imgs in (
        ("input", sample.input_cameras, sample.input_images),
        ("target", sample.target_cameras, sample.target_images),
    ):
        for j, (cam, img) in enumerate(zip(cams, imgs)):
            name = f"view_{idx:03d}.png"
            _save_image(path / name, img)
            entry = {
                "role": role,
                "image": name,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": float(cam.K[0, 2]),
                "cy": float(cam.K[1, 2]),
                "width": cam.width,
                "height": cam.height,
                "R": cam.R.reshape(-1).tolist(),
                "t": cam.t.tolist(),
            }
            if role == "input" and sample.input_depths is not None:
                dname = f"depth_{idx:03d}.pfm"
                write_pfm(path / dname, sample.input_depths[j])
                entry["depth"] = dname
            views.append(entry)
            idx += 1
    meta = {"seed": sample.seed, "radius": sample.radius, "views": views}
    (path / "cameras.json").write_text(json.dumps(meta, indent=1))
    if sample.gt_g is not None:
        np.savez(path / "gt_gaussians.npz", g=sample.gt_g,
                 sh_degree=sample.gt_sh_degree)


def load_scene_dir(path) -> SceneSample:
    path = Path(path)
    meta_path = path / "cameras.json"
    if not meta_path.exists():
        raise SceneError(f"{path}: missing cameras.json")
    meta = json.loads(meta_path.read_text())
    in_cams, in_imgs, in_depths = [], [], []
    tg_cams, tg_imgs = [], []
    any_depth = False
    for view in meta["views"]:
        K = np.array(
            [[view["fx"], 0, view["cx"]], [0, view["fy"], view["cy"]], [0, 0, 1.0]]
        )
        cam = Camera(K, np.asarray(view["R"]).reshape(3, 3), np.asarray(view["t"]),
                     width=view["width"], height=view["height"])
        img_path = path / view["image"]
        if not img_path.exists():
            raise SceneError(f"{path}: missing image {view['image']}")
        img = _load_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneError(
                f"{view['image']}: size {img.shape[:2]} does not match camera "
                f"{(cam.height, cam.width)}"
            )
        if view["role"] == "input":
            in_cams.append(cam)
            in_imgs.append(img)
            if "depth" in view:
                in_depths.append(read_pfm(path / view["depth"]))
                any_depth = True
            else:
                in_depths.append(None)
        elif view["role"] == "target":
            tg_cams.append(cam)
            tg_imgs.append(img)
        else:
            raise SceneError(f"unknown view role {view['role']!r}")
    if any_depth and any(d is None for d in in_depths):
        raise SceneError(f"{path}: depth present for only some input views")
    gt_g = None
    gt_deg = 1
    gt_path = path / "gt_gaussians.npz"
    if gt_path.exists():
        with np.load(gt_path) as z:
            gt_g = z["g"]
            gt_deg = int(z["sh_degree"])
    return SceneSample(
        input_cameras=in_cams,
        input_images=in_imgs,
        target_cameras=tg_cams,
        target_images=tg_imgs,
        input_depths=in_depths if any_depth else None,
        radius=float(meta["radius"]),
        seed=int(meta["seed"]),
        gt_g=gt_g,
        gt_sh_degree=gt_deg,
    )

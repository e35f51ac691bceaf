"""Camera model, projection/unprojection, depth resizing and kNN search.

Conventions: world-to-camera is x_cam = R p + t with z forward; pixel (i, j)
has its center at continuous coordinates (j + 0.5, i + 0.5), so K maps camera
points to that continuous pixel space. For subsampled grids the intrinsics
are rescaled by the stride, which keeps unprojection consistent with the
half-pixel convention used everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class GeometryError(ValueError):
    pass


@dataclass
class Camera:
    """Intrinsics/extrinsics plus image size for one view."""

    K: np.ndarray  # 3x3, pixels
    R: np.ndarray  # 3x3 rotation, world -> camera
    t: np.ndarray  # 3-vector, scene units
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise GeometryError("rotation is not orthonormal within 1e-9")
        if np.linalg.det(self.R) < 0:
            raise GeometryError("rotation has negative determinant")
        fx, fy = self.K[0, 0], self.K[1, 1]
        if fx <= 0 or fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        cx, cy = self.K[0, 2], self.K[1, 2]
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise GeometryError(f"principal point ({cx}, {cy}) outside image bounds")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def scaled(self, stride: int) -> "Camera":
        """Intrinsics for the grid subsampled by ``stride``."""
        K = self.K.copy()
        K[0] /= stride
        K[1] /= stride
        return Camera(
            K,
            self.R,
            self.t,
            width=int(np.ceil(self.width / stride)),
            height=int(np.ceil(self.height / stride)),
        )


def project(camera: Camera, p) -> tuple[float, float, float, bool]:
    """Project a world point; returns (u, v, camera depth, behind flag)."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    xc = camera.R @ p + camera.t
    z = xc[2]
    behind = z <= 0
    zs = z if z != 0 else np.finfo(np.float64).tiny
    u = camera.fx * xc[0] / zs + camera.K[0, 2]
    v = camera.fy * xc[1] / zs + camera.K[1, 2]
    return float(u), float(v), float(z), bool(behind)


def project_points(camera: Camera, pts: np.ndarray):
    """Vectorized projection of an M x 3 array; see ``project``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    xc = pts @ camera.R.T + camera.t
    z = xc[:, 2]
    behind = z <= 0
    zs = np.where(z == 0, np.finfo(np.float64).tiny, z)
    u = camera.fx * xc[:, 0] / zs + camera.K[0, 2]
    v = camera.fy * xc[:, 1] / zs + camera.K[1, 2]
    return u, v, z, behind


@dataclass
class PointCloud:
    """Subsampled 3D points with raw and context-aggregated features."""

    positions: T.Tensor  # M x 3
    features: T.Tensor  # M x C1
    view_index: np.ndarray  # M, source view per point
    grid_shape: tuple[int, int, int]  # (N views, grid h, grid w)
    aggregated: T.Tensor | None = None  # M x C1, filled by context aggregation

    def __post_init__(self):
        n, h, w = self.grid_shape
        if self.positions.shape[0] != n * h * w:
            raise GeometryError(
                f"point count {self.positions.shape[0]} != N*h*w = {n * h * w}"
            )

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def downsample_depth(depth, stride: int) -> T.Tensor:
    """Bilinear resize of a positive depth map to the ceil(H/s) grid."""
    depth = T.as_tensor(depth)
    if depth.ndim != 2:
        raise GeometryError(f"depth must be H x W, got {depth.shape}")
    if not np.any(depth.values > 0):
        raise GeometryError("depth map has no positive values")
    h, w = depth.shape
    ho = int(np.ceil(h / stride))
    wo = int(np.ceil(w / stride))
    if (ho, wo) == (h, w):
        return depth
    out = T.resize_bilinear(T.reshape(depth, (h, w, 1)), (ho, wo))
    return T.reshape(out, (ho, wo))


def unproject(camera: Camera, depth_q: T.Tensor, feat_q: T.Tensor, view_index: int = 0,
              stride: int = 1) -> PointCloud:
    """Lift a subsampled depth grid plus features to a world-space fragment.

    ``depth_q`` is (h, w) on the grid subsampled by ``stride``; each grid
    pixel center is unprojected along its ray: p = center + dir * depth.
    Differentiable in depth and features.
    """
    depth_q = T.as_tensor(depth_q)
    feat_q = T.as_tensor(feat_q)
    h, w = depth_q.shape
    if feat_q.shape[:2] != (h, w):
        raise GeometryError(f"feature grid {feat_q.shape} does not match depth {depth_q.shape}")
    cam_s = camera.scaled(stride)
    if abs(np.linalg.det(cam_s.K)) < 1e-12:
        raise GeometryError("singular intrinsics")
    Kinv = np.linalg.inv(cam_s.K)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([jj + 0.5, ii + 0.5, np.ones_like(jj, dtype=np.float64)], axis=-1)
    rays = (pix.reshape(-1, 3) @ Kinv.T) @ camera.R  # R^-1 K^-1 u, row-major points
    center = camera.center
    dt = T.default_dtype()
    rays_t = T.Tensor(rays.astype(dt))
    center_t = T.Tensor(np.broadcast_to(center, (h * w, 3)).astype(dt))
    d = T.reshape(depth_q, (h * w, 1))
    positions = rays_t * d + center_t
    feats = T.reshape(feat_q, (h * w, feat_q.shape[-1]))
    return PointCloud(
        positions=positions,
        features=feats,
        view_index=np.full(h * w, view_index, dtype=np.int64),
        grid_shape=(1, h, w),
    )


def merge_fragments(fragments: list[PointCloud]) -> PointCloud:
    """Concatenate per-view fragments in view-major order."""
    if not fragments:
        raise GeometryError("no fragments to merge")
    h, w = fragments[0].grid_shape[1:]
    for f in fragments:
        if f.grid_shape[1:] != (h, w):
            raise GeometryError("fragments disagree on grid shape")
    return PointCloud(
        positions=T.concat([f.positions for f in fragments], axis=0),
        features=T.concat([f.features for f in fragments], axis=0),
        view_index=np.concatenate([f.view_index for f in fragments]),
        grid_shape=(sum(f.grid_shape[0] for f in fragments), h, w),
    )


# ---------------------------------------------------------------------------
# k nearest neighbors over a uniform grid
# ---------------------------------------------------------------------------

def knn_brute(points: np.ndarray, k: int) -> np.ndarray:
    """Reference O(M^2) kNN, self included, ties broken by lower index."""
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    if m < k:
        raise GeometryError(f"need at least k={k} points, got {m}")
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _median_nn_estimate(pts: np.ndarray) -> float:
    m = pts.shape[0]
    take = min(m, 256)
    idx = np.linspace(0, m - 1, take).astype(np.int64)
    sample = pts[idx]
    d2 = ((sample[:, None, :] - sample[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    nn = nn[np.isfinite(nn)]
    med = float(np.median(nn)) if nn.size else 0.0
    return med


def knn(points, k: int) -> np.ndarray:
    """Exact k nearest neighbors (self included, ties to the lower index).

    Candidates come from a uniform spatial grid searched in expanding
    Chebyshev rings; a query is finished once its k-th distance provably
    beats anything outside the searched rings, so results match the brute
    force exactly. Cell size is 2x a median nearest-neighbor estimate.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = pts.shape[0]
    if m < k:
        raise GeometryError(f"need at least k={k} points, got {m}")
    if k == m or m <= 64:
        return knn_brute(pts, k)

    cell = 2.0 * _median_nn_estimate(pts)
    if not np.isfinite(cell) or cell <= 0:
        span = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
        cell = max(span / max(np.cbrt(m), 1.0), 1e-12)

    origin = pts.min(axis=0)
    cc = np.floor((pts - origin) / cell).astype(np.int64)
    dims = cc.max(axis=0) + 1
    key = (cc[:, 0] * dims[1] + cc[:, 1]) * dims[2] + cc[:, 2]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    uniq_keys, starts = np.unique(sorted_key, return_index=True)
    ends = np.append(starts[1:], m)

    result = np.empty((m, k), dtype=np.int64)
    active = np.arange(m)
    r = 1
    max_r = int(dims.max()) + 1
    while active.size:
        a = active.size
        # all cells of the cube of Chebyshev radius r around each active query
        rng1d = np.arange(-r, r + 1)
        ox, oy, oz = np.meshgrid(rng1d, rng1d, rng1d, indexing="ij")
        offs = np.stack([ox, oy, oz], axis=-1).reshape(-1, 3)
        cand_cells = cc[active][:, None, :] + offs[None, :, :]
        valid = np.all((cand_cells >= 0) & (cand_cells < dims), axis=-1)
        ckey = (cand_cells[..., 0] * dims[1] + cand_cells[..., 1]) * dims[2] + cand_cells[..., 2]
        pos = np.searchsorted(uniq_keys, ckey)
        pos_c = np.minimum(pos, uniq_keys.size - 1)
        hit = valid & (uniq_keys[pos_c] == ckey)
        s = np.where(hit, starts[pos_c], 0)
        e = np.where(hit, ends[pos_c], 0)
        lens = e - s
        per_query = lens.sum(axis=1)
        total = int(per_query.sum())
        # ragged expansion of [start, end) runs into one flat candidate list
        flat_lens = lens.reshape(-1)
        nz = flat_lens > 0
        reps = flat_lens[nz]
        run_starts = s.reshape(-1)[nz]
        offsets = np.repeat(np.cumsum(reps) - reps, reps)
        intra = np.arange(total) - offsets
        cand_sorted_pos = np.repeat(run_starts, reps) + intra
        cand_idx = order[cand_sorted_pos]
        q_ids = np.repeat(np.arange(a), per_query)

        diff = pts[active][q_ids] - pts[cand_idx]
        d2 = np.einsum("ij,ij->i", diff, diff)
        sel = np.lexsort((cand_idx, d2, q_ids))
        q_sorted = q_ids[sel]
        seg_start = np.searchsorted(q_sorted, np.arange(a))
        rank = np.arange(total) - seg_start[q_sorted]
        keep = rank < k

        enough = per_query >= k
        kth_pos = seg_start + (k - 1)
        kth_d2 = np.full(a, np.inf)
        kth_d2[enough] = d2[sel][np.minimum(kth_pos[enough], total - 1)]
        bound = (r * cell) ** 2
        done = enough & ((kth_d2 < bound) | (r >= max_r))

        if np.any(done):
            done_mask_pairs = done[q_sorted] & keep
            rows = active[q_sorted[done_mask_pairs]]
            cols = rank[done_mask_pairs]
            result[rows, cols] = cand_idx[sel][done_mask_pairs]
        active = active[~done]
        r += 1
    return result


def knn_spacing(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Per-point mean distance to its (non-self) neighbors."""
    pts = np.asarray(points, dtype=np.float64)
    nbr = pts[idx]  # M x k x 3
    d = np.linalg.norm(nbr - pts[:, None, :], axis=-1)
    mask = idx != np.arange(pts.shape[0])[:, None]
    counts = np.maximum(mask.sum(axis=1), 1)
    return (d * mask).sum(axis=1) / counts


def mean_knn_distance(points: np.ndarray, idx: np.ndarray) -> float:
    """Mean distance to the (non-self) neighbors over the whole cloud."""
    spacing = knn_spacing(points, idx)
    return float(spacing.mean()) if spacing.size else 0.0

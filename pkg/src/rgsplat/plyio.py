"""PLY export/import in the conventional splat-viewer layout.

Binary little-endian, one vertex per Gaussian with float32 properties
x, y, z, nx, ny, nz (zeros), f_dc_0..2, f_rest_* (channel-major higher SH
bands), opacity (logit), scale_0..2 (log), rot_0..3.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .renderer import (
    GaussianSet,
    LOG_SCALE,
    OPACITY,
    POS,
    QUAT,
    SH_START,
    sh_coeff_count,
)


class PlyError(ValueError):
    pass


def _property_names(sh_degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_ply(gaussians: GaussianSet, path) -> None:
    g = np.asarray(gaussians.g.values, dtype=np.float32)
    m = g.shape[0]
    K = sh_coeff_count(gaussians.sh_degree)
    sh = g[:, SH_START : SH_START + 3 * K].reshape(m, K, 3)
    f_dc = sh[:, 0, :]
    f_rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(m, -1)  # channel-major
    cols = np.concatenate(
        [
            g[:, POS],
            np.zeros((m, 3), dtype=np.float32),
            f_dc,
            f_rest,
            g[:, OPACITY : OPACITY + 1],
            g[:, LOG_SCALE],
            g[:, QUAT],
        ],
        axis=1,
    ).astype("<f4")
    names = _property_names(gaussians.sh_degree)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {m}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(cols).tobytes())


def load_ply(path) -> GaussianSet:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise PlyError(f"{path}: not a PLY file")
        if f.readline().strip() != b"format binary_little_endian 1.0":
            raise PlyError(f"{path}: only binary little-endian PLY is supported")
        names = []
        count = 0
        while True:
            line = f.readline().strip().decode("ascii")
            if line == "end_header":
                break
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                kind, name = line.split()[1:]
                if kind != "float":
                    raise PlyError(f"{path}: unsupported property type {kind}")
                names.append(name)
        data = np.frombuffer(f.read(count * len(names) * 4), dtype="<f4")
    if data.size != count * len(names):
        raise PlyError(f"{path}: truncated payload")
    table = {n: data.reshape(count, len(names))[:, i] for i, n in enumerate(names)}
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    K = 1 + n_rest // 3
    degree = int(np.sqrt(K)) - 1
    if sh_coeff_count(degree) != K:
        raise PlyError(f"{path}: f_rest count {n_rest} is not a full SH band")
    sh = np.zeros((count, K, 3), dtype=np.float32)
    for c in range(3):
        sh[:, 0, c] = table[f"f_dc_{c}"]
    for c in range(3):
        for k in range(K - 1):
            sh[:, 1 + k, c] = table[f"f_rest_{c * (K - 1) + k}"]
    g = np.concatenate(
        [
            np.stack([table["x"], table["y"], table["z"]], axis=1),
            table["opacity"][:, None],
            np.stack([table["scale_0"], table["scale_1"], table["scale_2"]], axis=1),
            np.stack([table[f"rot_{i}"] for i in range(4)], axis=1),
            sh.reshape(count, -1),
        ],
        axis=1,
    )
    return GaussianSet(
        T.Tensor(g.astype(T.default_dtype())),
        T.Tensor(np.zeros((count, 1))),
        sh_degree=degree,
    )

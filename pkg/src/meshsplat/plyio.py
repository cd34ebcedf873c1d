"""Splat point-cloud export in the PLY layout common splat viewers read:
positions, zero normals, SH DC terms as f_dc_*, raw opacity logit, log world
scales and the (normalized) world rotation quaternion, all float32."""

from __future__ import annotations

import numpy as np

from . import gauss, meshrig, rectifier
from .errors import DatasetError

PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
             "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3")


def splat_rows_at_pose(splats, mesh, pose, rect_params=None):
    """World-space attribute rows for a splat set bound to a posed mesh."""
    posed = meshrig.pose_mesh(mesh, pose)
    frames = meshrig.mesh_triangle_frames(mesh, posed)
    mu, r, s, _ = meshrig.bind_to_global(splats.mu_local, splats.rot_local,
                                         splats.scale, frames,
                                         splats.parent_face)
    if rect_params is not None:
        d_mu, d_r, d_s = rectifier.rectify_forward(
            rect_params, mu, pose.flat_body_vector(rectifier.POSE_DIM))
        mu, r, s, _ = rectifier.apply_deltas(mu, r, s, d_mu, d_r, d_s)
    r = gauss.quat_normalize(r)
    n = len(splats)
    rows = np.zeros((n, len(PLY_PROPS)), dtype=np.float32)
    rows[:, 0:3] = mu
    rows[:, 6:9] = splats.sh_coeffs[:, :, 0]
    rows[:, 9] = splats.opacity_logit
    rows[:, 10:13] = np.log(s)
    rows[:, 13:17] = r
    return rows


def export_ply(path, rows, binary=True):
    """Write attribute rows to PLY (binary little-endian or ASCII)."""
    rows = np.asarray(rows, dtype=np.float32)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {rows.shape[0]}"]
    header += [f"property float {p}" for p in PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            f.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
        else:
            for row in rows:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode())


def read_ply(path):
    """Read a PLY written by export_ply; returns (property_names, rows)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    header = data[:end].decode().splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = next(l.split()[1] for l in header if l.startswith("format"))
    n = int(next(l.split()[2] for l in header if l.startswith("element vertex")))
    props = [l.split()[2] for l in header if l.startswith("property")]
    if fmt == "binary_little_endian":
        rows = np.frombuffer(body, dtype="<f4", count=n * len(props))
        rows = rows.reshape(n, len(props)).astype(np.float64)
    else:
        rows = np.array([[float(v) for v in line.split()]
                         for line in body.decode().splitlines()[:n]])
    return props, rows

"""Rigged template mesh: linear blend skinning, triangle local frames, and the
local-to-global binding transform for mesh-embedded Gaussians.

Conventions fixed here: faces are counter-clockwise wound (outward normal
e x (v_c - v_a)), the joint hierarchy is topologically ordered with the root
first, and the rest pose is the identity configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import gauss
from .errors import DegenerateFaceError, RigError

DEGENERATE_AREA = 1e-12
ZERO_ANGLE = 1e-12


@dataclass
class RiggedMesh:
    """Template vertices, faces, skinning weights and a joint chain."""

    vertices: np.ndarray              # (n, 3) rest positions, meters
    faces: np.ndarray                 # (m, 3) int64 vertex indices
    skin_weights: np.ndarray          # (n, J) rows sum to 1
    joint_parents: np.ndarray         # (J,) int64, root = -1
    joint_rest_positions: np.ndarray  # (J, 3) meters

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.joint_rest_positions = np.asarray(self.joint_rest_positions, dtype=float)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def n_joints(self):
        return self.joint_parents.shape[0]

    def validate(self):
        n, J = self.n_vertices, self.n_joints
        if self.vertices.shape != (n, 3):
            raise RigError(f"vertices shape {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise RigError(f"faces shape {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise RigError("face vertex index out of range")
        if self.skin_weights.shape != (n, J):
            raise RigError(
                f"skin_weights shape {self.skin_weights.shape}, expected {(n, J)}")
        if np.any(self.skin_weights < 0):
            raise RigError("negative skinning weight")
        sums = self.skin_weights.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise RigError(
                f"skin-weight row for vertex {bad[0]} sums to {sums[bad[0]]:.6g}, "
                "expected 1 within 1e-6")
        if self.joint_rest_positions.shape != (J, 3):
            raise RigError("joint_rest_positions shape mismatch")
        if J == 0 or self.joint_parents[0] != -1:
            raise RigError("joint 0 must be the root (parent -1)")
        for j in range(1, J):
            p = self.joint_parents[j]
            if not 0 <= p < j:
                raise RigError(
                    f"joint {j} has parent {p}; hierarchy must be topologically "
                    "ordered (parent < child)")


@dataclass
class Pose:
    """Per-frame articulation: axis-angle per joint plus a root translation."""

    root_translation: np.ndarray   # (3,)
    joint_rotations: np.ndarray    # (J, 3) axis-angle, radians

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=float)
        self.joint_rotations = np.atleast_2d(np.asarray(self.joint_rotations, dtype=float))

    @property
    def n_joints(self):
        return self.joint_rotations.shape[0]

    def flat_body_vector(self, width):
        """Flattened non-root axis-angles, zero-padded/truncated to `width`.

        Feeds the rectifier; the root is excluded because global orientation
        is not a deformation cue.
        """
        body = self.joint_rotations[1:].reshape(-1)
        out = np.zeros(width)
        k = min(width, body.size)
        out[:k] = body[:k]
        return out

    @staticmethod
    def rest(n_joints):
        return Pose(np.zeros(3), np.zeros((n_joints, 3)))


def rodrigues(axis_angle):
    """Rotation matrix for an axis-angle vector; identity below 1e-12 rad.

    Broadcasts over leading dimensions.
    """
    v = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    batch = v.shape[:-1]
    R = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    active = theta >= ZERO_ANGLE
    if not np.any(active):
        return R if batch else R.reshape(3, 3)
    va = v[active]
    ta = theta[active][..., None, None]
    axis = va / theta[active][..., None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(
        axis.shape[:-1] + (3, 3))
    Ra = (np.eye(3) + np.sin(ta) * K + (1 - np.cos(ta)) * (K @ K))
    R[active] = Ra
    return R


def joint_world_transforms(mesh: RiggedMesh, pose: Pose):
    """Skinning transforms G_k mapping rest-space points to posed space.

    Composes (rest-offset, axis-angle rotation) pairs down the hierarchy and
    multiplies by the inverse rest transform, so the all-zero pose yields
    identities. Returns rotations (J, 3, 3) and translations (J, 3); the root
    translation is applied on top.
    """
    if pose.n_joints != mesh.n_joints:
        raise RigError(
            f"pose has {pose.n_joints} joints, rig has {mesh.n_joints}")
    J = mesh.n_joints
    R_local = rodrigues(pose.joint_rotations)
    rot = np.empty((J, 3, 3))
    trn = np.empty((J, 3))
    for j in range(J):
        p = mesh.joint_parents[j]
        if p < 0:
            offset = mesh.joint_rest_positions[j]
            rot[j] = R_local[j]
            trn[j] = offset
        else:
            offset = mesh.joint_rest_positions[j] - mesh.joint_rest_positions[p]
            rot[j] = rot[p] @ R_local[j]
            trn[j] = rot[p] @ offset + trn[p]
    # relative to rest: A_k(theta) * A_k(0)^-1, with A_k(0) = [I | rest_k]
    trn = trn - np.einsum("jab,jb->ja", rot, mesh.joint_rest_positions)
    return rot, trn


def pose_mesh(mesh: RiggedMesh, pose: Pose):
    """Linear blend skinning: v' = sum_k w_k G_k(v), plus the root translation."""
    rot, trn = joint_world_transforms(mesh, pose)
    # (n, J, 3): each joint's transform of each vertex
    per_joint = np.einsum("jab,nb->nja", rot, mesh.vertices) + trn[None, :, :]
    posed = np.einsum("nj,nja->na", mesh.skin_weights, per_joint)
    return posed + pose.root_translation


@dataclass
class TriangleFrames:
    """Per-face local frames: rotation columns [e_hat, n_hat, e_hat x n_hat],
    centroid origin, and the mean-edge scale."""

    R: np.ndarray   # (m, 3, 3)
    M: np.ndarray   # (m, 3)
    w: np.ndarray   # (m,)

    def quaternions(self):
        return gauss.quat_from_matrix(self.R)


def triangle_frames(v_a, v_b, v_c):
    """Local frames for triangles given their three vertex arrays (m, 3)."""
    v_a = np.atleast_2d(np.asarray(v_a, dtype=float))
    v_b = np.atleast_2d(np.asarray(v_b, dtype=float))
    v_c = np.atleast_2d(np.asarray(v_c, dtype=float))
    e = v_b - v_a
    ac = v_c - v_a
    cross = np.cross(e, ac)
    area2 = np.linalg.norm(cross, axis=-1)
    if np.any(area2 * 0.5 <= DEGENERATE_AREA):
        idx = int(np.argmin(area2))
        raise DegenerateFaceError(
            f"triangle {idx} area {area2[idx] * 0.5:.3e} below {DEGENERATE_AREA}")
    e_len = np.linalg.norm(e, axis=-1)
    e_hat = e / e_len[..., None]
    n_hat = cross / area2[..., None]
    b_hat = np.cross(e_hat, n_hat)
    R = np.stack([e_hat, n_hat, b_hat], axis=-1)  # columns
    M = (v_a + v_b + v_c) / 3.0
    e_p = ac - np.sum(ac * e_hat, axis=-1, keepdims=True) * e_hat
    w = 0.5 * (e_len + np.linalg.norm(e_p, axis=-1))
    return TriangleFrames(R=R, M=M, w=w)


def mesh_triangle_frames(mesh: RiggedMesh, posed_vertices):
    va = posed_vertices[mesh.faces[:, 0]]
    vb = posed_vertices[mesh.faces[:, 1]]
    vc = posed_vertices[mesh.faces[:, 2]]
    return triangle_frames(va, vb, vc)


def bind_to_global(mu_local, rot_local, scale_local, frames: TriangleFrames,
                   parent_face):
    """Transform splat attributes from triangle-local to global space.

    mu* = w R mu + M,  r* = quat(R) ∘ r,  s* = w s.
    Returns (mu_star, r_star, s_star) plus the per-splat frame quaternion
    (needed by the backward pass).
    """
    R = frames.R[parent_face]
    M = frames.M[parent_face]
    w = frames.w[parent_face]
    q_frame = gauss.quat_from_matrix(R)
    mu_star = w[:, None] * np.einsum("nab,nb->na", R, np.atleast_2d(mu_local)) + M
    r_star = gauss.quat_multiply(q_frame, gauss.quat_normalize(rot_local))
    s_star = w[:, None] * scale_local
    return mu_star, r_star, s_star, q_frame


def bind_to_global_backward(mu_local, rot_local, scale_local, frames,
                            parent_face, q_frame, grad_mu_star, grad_r_star,
                            grad_s_star):
    """VJP of bind_to_global wrt the raw splat parameters.

    Frames are treated as constants (the mesh is not optimized). Returns
    gradients wrt mu_local, the raw quaternion, and the activated local scale.
    """
    R = frames.R[parent_face]
    w = frames.w[parent_face]
    grad_mu_local = w[:, None] * np.einsum("nba,nb->na", R, grad_mu_star)
    _, grad_q_unit = gauss.quat_multiply_backward(
        q_frame, gauss.quat_normalize(rot_local), grad_r_star)
    grad_rot_raw = gauss.quat_normalize_backward(rot_local, grad_q_unit)
    grad_scale_local = w[:, None] * grad_s_star
    return grad_mu_local, grad_rot_raw, grad_scale_local


# ---------------------------------------------------------------------------
# rig file I/O (JSON, schema documented in the README)

RIG_SCHEMA_KEYS = ("vertices", "faces", "skin_weights", "joint_parents",
                   "joint_rest_positions")


def load_rig(path):
    with open(path) as f:
        data = json.load(f)
    missing = [k for k in RIG_SCHEMA_KEYS if k not in data]
    if missing:
        raise RigError(f"{path}: missing rig keys {missing}")
    mesh = RiggedMesh(
        vertices=np.array(data["vertices"], dtype=float),
        faces=np.array(data["faces"], dtype=np.int64),
        skin_weights=np.array(data["skin_weights"], dtype=float),
        joint_parents=np.array(data["joint_parents"], dtype=np.int64),
        joint_rest_positions=np.array(data["joint_rest_positions"], dtype=float),
    )
    try:
        mesh.validate()
    except RigError as e:
        raise RigError(f"{path}: {e}") from e
    return mesh


def save_rig(mesh: RiggedMesh, path):
    data = {
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "skin_weights": mesh.skin_weights.tolist(),
        "joint_parents": mesh.joint_parents.tolist(),
        "joint_rest_positions": mesh.joint_rest_positions.tolist(),
    }
    with open(path, "w") as f:
        json.dump(data, f)

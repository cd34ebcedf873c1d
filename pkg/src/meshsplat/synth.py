"""Synthetic articulated-tube fixture: a bending cylinder rig, procedurally
textured ground-truth splats, and a rendered pose sweep.

The generator paints the tube with known splat attributes and renders the
frames with the same pipeline the trainer optimizes through, so the ground
truth is exactly representable by the model class and training loss can
approach zero. An optional pose-driven radial bulge adds deformation the
rig's skinning cannot express, for exercising the rectification network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import gauss, images, pipeline
from .gauss import GaussianSplats
from .meshrig import Pose, RiggedMesh, save_rig
from .rasterizer import Camera, look_at


@dataclass
class SyntheticRigSpec:
    segments: int = 2
    segment_length: float = 0.42     # meters
    rings_per_segment: int = 3
    ring_vertices: int = 8
    radius: float = 0.13
    overhang: float = 0.6            # tube extent past the last joint, in segment lengths
    texture_seed: int = 7
    sh_degree: int = 3
    # pose sweep
    n_train_poses: int = 20
    n_test_poses: int = 5
    bend_amplitude: float = 0.5      # radians
    turntable_turns: float = 1.0     # root revolutions across the train sweep
    bulge_amplitude: float = 0.0     # meters of pose-driven radial offset
    # rendering
    image_size: int = 128
    camera_distance_factor: float = 1.6  # in units of tube height

    @property
    def n_joints(self):
        return self.segments + 1

    @property
    def height(self):
        return self.segment_length * (self.segments + self.overhang)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return SyntheticRigSpec(**d)


def build_rig(spec: SyntheticRigSpec) -> RiggedMesh:
    """Open tube along +y with a joint chain at segment boundaries."""
    L = spec.segment_length
    n_rings = int(np.ceil(spec.height / L * spec.rings_per_segment)) + 1
    heights = np.linspace(0.0, spec.height, n_rings)
    K = spec.ring_vertices
    theta = 2.0 * np.pi * np.arange(K) / K
    ring = np.stack([spec.radius * np.cos(theta),
                     np.zeros(K),
                     spec.radius * np.sin(theta)], axis=1)
    vertices = np.concatenate([ring + [0.0, h, 0.0] for h in heights], axis=0)

    faces = []
    for i in range(n_rings - 1):
        for j in range(K):
            a = i * K + j
            b = i * K + (j + 1) % K
            c = (i + 1) * K + j
            d = (i + 1) * K + (j + 1) % K
            # wound so e x (v_c - v_a) points radially outward
            faces.append([a, d, b])
            faces.append([a, c, d])
    faces = np.array(faces, dtype=np.int64)

    J = spec.n_joints
    joint_rest = np.stack([np.zeros(J), L * np.arange(J), np.zeros(J)], axis=1)
    parents = np.arange(J, dtype=np.int64) - 1

    # hat-function weights with a linear blend band around each joint
    tau = 0.25 * L
    y = vertices[:, 1]
    f = np.ones((vertices.shape[0], J + 1))
    f[:, J] = 0.0
    for k in range(1, J):
        f[:, k] = np.clip((y - (k * L - tau)) / (2.0 * tau), 0.0, 1.0)
    weights = f[:, :J] - f[:, 1:J + 1]

    mesh = RiggedMesh(vertices=vertices, faces=faces, skin_weights=weights,
                      joint_parents=parents, joint_rest_positions=joint_rest)
    mesh.validate()
    return mesh


def build_ground_truth(spec: SyntheticRigSpec, mesh: RiggedMesh) -> GaussianSplats:
    """One known splat per face: striped palette colors, surface-flattened
    scales, high opacity, mild attribute jitter."""
    rng = np.random.default_rng(spec.texture_seed)
    m = mesh.n_faces
    k = gauss.num_sh_coeffs(spec.sh_degree)

    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    band = np.floor(centroids[:, 1] / spec.height * 6.0)
    angle = np.arctan2(centroids[:, 2], centroids[:, 0])
    wedge = np.floor((angle + np.pi) / (2.0 * np.pi) * 4.0)
    palette = np.array([
        [0.80, 0.25, 0.20], [0.20, 0.65, 0.30], [0.22, 0.35, 0.80],
        [0.82, 0.70, 0.20], [0.60, 0.25, 0.70], [0.20, 0.70, 0.70],
        [0.75, 0.45, 0.22], [0.38, 0.38, 0.38],
    ])
    base = palette[((band * 4 + wedge) % len(palette)).astype(int)]
    base = np.clip(base + rng.uniform(-0.06, 0.06, size=(m, 3)), 0.15, 0.85)

    sh = np.zeros((m, 3, k))
    sh[:, :, 0] = (base - 0.5) / gauss.SH_C0
    if k > 1:
        sh[:, :, 1:] = rng.normal(scale=0.02, size=(m, 3, k - 1))

    # local frame axis 1 is the face normal: keep splats surface-flattened
    scale = np.stack([rng.uniform(0.45, 0.85, m),
                      rng.uniform(0.10, 0.25, m),
                      rng.uniform(0.45, 0.85, m)], axis=1)
    rot = gauss.quat_normalize(
        np.concatenate([np.ones((m, 1)), rng.normal(scale=0.08, size=(m, 3))],
                       axis=1))
    return GaussianSplats(
        mu_local=rng.normal(scale=0.10, size=(m, 3)),
        rot_local=rot,
        log_scale=np.log(scale),
        opacity_logit=gauss.opacity_inverse_activation(
            rng.uniform(0.80, 0.95, m)),
        sh_coeffs=sh,
        parent_face=np.arange(m, dtype=np.int64),
        sh_degree=spec.sh_degree,
    )


def sweep_phases(spec: SyntheticRigSpec):
    """(phase, split) pairs: train phases uniform on the cycle, test phases
    midway between consecutive train phases."""
    out = []
    for t in range(spec.n_train_poses):
        out.append((t / spec.n_train_poses, "train"))
    for t in range(spec.n_test_poses):
        out.append(((t + 0.5) / spec.n_train_poses, "test"))
    return out


def pose_at_phase(spec: SyntheticRigSpec, phase: float) -> Pose:
    """Root turntable plus sinusoidal bends of the chain joints."""
    J = spec.n_joints
    rot = np.zeros((J, 3))
    a = spec.bend_amplitude
    w = 2.0 * np.pi * phase
    rot[0, 1] = 2.0 * np.pi * spec.turntable_turns * phase
    if J > 1:
        rot[1, 2] = a * np.sin(w)
        rot[1, 0] = 0.15 * a * np.sin(2.0 * w)
    for j in range(2, J):
        rot[j, 2] = 0.7 * a * np.sin(w + 1.3 * (j - 1))
    return Pose(root_translation=np.zeros(3), joint_rotations=rot)


def bulge_drive(phase: float) -> float:
    """Pose-correlated driver shared with the primary bend channel."""
    return float(np.sin(2.0 * np.pi * phase))


def bulged_mesh(spec: SyntheticRigSpec, mesh: RiggedMesh, phase: float) -> RiggedMesh:
    """Radial rest-space offset, strongest mid-tube, scaled by the drive.

    Deformation the skinning weights cannot reproduce; zero amplitude returns
    the input mesh unchanged.
    """
    if spec.bulge_amplitude == 0.0:
        return mesh
    v = mesh.vertices
    radial = v - np.array([0.0, 1.0, 0.0]) * v[:, 1:2]
    rnorm = np.linalg.norm(radial, axis=1, keepdims=True)
    radial = radial / np.where(rnorm > 0, rnorm, 1.0)
    bump = np.exp(-((v[:, 1] - 0.5 * spec.height) / (0.30 * spec.height)) ** 2)
    offset = spec.bulge_amplitude * bulge_drive(phase) * bump[:, None] * radial
    return RiggedMesh(vertices=v + offset, faces=mesh.faces,
                      skin_weights=mesh.skin_weights,
                      joint_parents=mesh.joint_parents,
                      joint_rest_positions=mesh.joint_rest_positions)


def make_camera(spec: SyntheticRigSpec) -> Camera:
    size = spec.image_size
    h_mid = 0.5 * spec.height
    dist = spec.camera_distance_factor * spec.height
    extent = 0.62 * spec.height  # half-height plus bend margin
    f = 0.5 * size * dist / extent
    return Camera(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size,
                  height=size,
                  world_to_camera=look_at([0.0, h_mid, dist], [0.0, h_mid, 0.0]))


def render_ground_truth(spec: SyntheticRigSpec, mesh: RiggedMesh,
                        splats: GaussianSplats, camera: Camera, phase: float):
    """Render the textured tube at a sweep phase with the shared pipeline."""
    gen_mesh = bulged_mesh(spec, mesh, phase)
    return pipeline.render_frame(splats, gen_mesh, pose_at_phase(spec, phase),
                                 camera)


def synth_generate(spec: SyntheticRigSpec, out_dir):
    """Write rig.json, manifest.json and the rendered PNG pose sweep.

    Deterministic for a fixed spec: byte-identical files on re-run.
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    mesh = build_rig(spec)
    splats = build_ground_truth(spec, mesh)
    camera = make_camera(spec)

    save_rig(mesh, out_dir / "rig.json")
    frames = []
    for idx, (phase, split) in enumerate(sweep_phases(spec)):
        pose = pose_at_phase(spec, phase)
        output = render_ground_truth(spec, mesh, splats, camera, phase)
        name = f"frames/frame_{idx:04d}.png"
        images.save_png(out_dir / name, output.color)
        frames.append({
            "image": name,
            "split": split,
            "phase": phase,
            "camera": camera.to_dict(),
            "pose": {"root_translation": pose.root_translation.tolist(),
                     "joint_rotations": pose.joint_rotations.tolist()},
        })
    manifest = {
        "schema_version": 1,
        "rig": "rig.json",
        "generator": {"synthetic_rig": spec.to_dict()},
        "frames": frames,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest_path

"""Dataset ingestion: a JSON manifest referencing a rig file and a list of
frames (image path, camera, pose, split tag). All invariants are validated
eagerly at load time with errors naming the offending file or field."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images
from .errors import DatasetError
from .meshrig import Pose, RiggedMesh, load_rig
from .rasterizer import Camera

MANIFEST_SCHEMA_VERSION = 1
VALID_SPLITS = ("train", "test")


@dataclass
class Frame:
    image: np.ndarray      # (H, W, 3) float in [0, 1]
    camera: Camera
    pose: Pose
    split: str
    path: str
    phase: float = 0.0     # generator sweep phase, when present


@dataclass
class Dataset:
    mesh: RiggedMesh
    frames: list
    root: Path
    generator: dict = field(default_factory=dict)

    def split(self, name):
        if name == "all":
            return list(self.frames)
        return [f for f in self.frames if f.split == name]


def _parse_pose(d, n_joints, where):
    try:
        pose = Pose(root_translation=np.array(d["root_translation"], dtype=float),
                    joint_rotations=np.array(d["joint_rotations"], dtype=float))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{where}: malformed pose ({e})") from e
    if pose.joint_rotations.shape != (n_joints, 3):
        raise DatasetError(
            f"{where}: pose has {pose.joint_rotations.shape[0]} joints, "
            f"rig has {n_joints}")
    if not np.all(np.isfinite(pose.joint_rotations)):
        raise DatasetError(f"{where}: non-finite joint rotation")
    return pose


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        with open(manifest_path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"manifest missing: {manifest_path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    version = data.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise DatasetError(
            f"{manifest_path}: schema_version {version}, expected "
            f"{MANIFEST_SCHEMA_VERSION}")
    if "rig" not in data or "frames" not in data:
        raise DatasetError(f"{manifest_path}: manifest needs 'rig' and 'frames'")
    rig_path = root / data["rig"]
    if not rig_path.exists():
        raise DatasetError(f"{manifest_path}: rig file missing: {rig_path}")
    mesh = load_rig(rig_path)  # RigError speaks for itself on bad rigs

    frames = []
    for i, fr in enumerate(data["frames"]):
        where = f"{manifest_path} frame {i}"
        for key in ("image", "camera", "pose"):
            if key not in fr:
                raise DatasetError(f"{where}: missing '{key}'")
        img_path = root / fr["image"]
        if not img_path.exists():
            raise DatasetError(f"{where}: image file missing: {img_path}")
        img = images.load_png(img_path)
        camera = Camera.from_dict(fr["camera"])
        if img.shape[0] != camera.height or img.shape[1] != camera.width:
            raise DatasetError(
                f"{where}: image is {img.shape[1]}x{img.shape[0]}, camera "
                f"declares {camera.width}x{camera.height}")
        split = fr.get("split", "train")
        if split not in VALID_SPLITS:
            raise DatasetError(f"{where}: unknown split tag {split!r}")
        pose = _parse_pose(fr["pose"], mesh.n_joints, where)
        frames.append(Frame(image=img, camera=camera, pose=pose, split=split,
                            path=str(img_path), phase=float(fr.get("phase", 0.0))))
    return Dataset(mesh=mesh, frames=frames, root=root,
                   generator=data.get("generator", {}))

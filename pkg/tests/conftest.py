import numpy as np
import pytest

from meshsplat import synth
from meshsplat.synth import SyntheticRigSpec


@pytest.fixture(scope="session")
def tiny_spec():
    """Small, fast fixture rig: 48px frames, short sweep."""
    return SyntheticRigSpec(segments=2, rings_per_segment=2, ring_vertices=6,
                            image_size=48, n_train_poses=4, n_test_poses=2,
                            sh_degree=1)


@pytest.fixture(scope="session")
def tiny_scene(tiny_spec):
    mesh = synth.build_rig(tiny_spec)
    splats = synth.build_ground_truth(tiny_spec, mesh)
    camera = synth.make_camera(tiny_spec)
    return tiny_spec, mesh, splats, camera

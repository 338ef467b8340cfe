"""Shared fixtures: small meshes, random instances and the bend benchmark."""

import numpy as np
import pytest

from nrreg import Shape, SolverConfig, synth_deformation
from nrreg.synthesis import DeformationSpec, landmark_subset, make_strip


@pytest.fixture
def triangle_obj(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    return path


@pytest.fixture
def square_shape():
    """Unit square in the z=0 plane, two triangles."""
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return Shape(vertices=verts, faces=faces)


def random_cloud(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(n, 3))


@pytest.fixture(scope="session")
def bend_instance():
    """The strip-bend benchmark used across solver and acceptance tests."""
    template = make_strip(25, 8, 0.1, relief=0.5)
    spec = DeformationSpec(kind="bend", angle_deg=45.0, axis=(0, 1, 0),
                           axis_point=(1.2, 0, 0), blend_direction=(1, 0, 0),
                           band_start=1.15, band_end=1.25)
    target, gt_positions, gt_stack = synth_deformation(template, spec)
    landmarks = landmark_subset(template.n_vertices, 0.2, seed=1)
    cfg = SolverConfig(max_dist_factor=1.5)
    return {"template": template, "target": target, "gt": gt_positions,
            "gt_stack": gt_stack, "landmarks": landmarks, "cfg": cfg}

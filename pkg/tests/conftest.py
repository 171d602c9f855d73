import numpy as np
import pytest
import trimesh

from src.geom import TriMesh


@pytest.fixture
def cube_mesh() -> TriMesh:
    """Closed, outward-oriented cube [-0.5, 0.5]^3 with two triangles per side."""
    box = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    return TriMesh(np.asarray(box.vertices), np.asarray(box.faces))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

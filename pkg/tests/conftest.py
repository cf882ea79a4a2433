import numpy as np
import pytest

from heatflow.mesh import build_disk_mesh

_mesh_cache = {}


@pytest.fixture
def mesh_at():
    def get(refinement):
        if refinement not in _mesh_cache:
            _mesh_cache[refinement] = build_disk_mesh(refinement)
        return _mesh_cache[refinement]
    return get


@pytest.fixture
def mesh2(mesh_at):
    return mesh_at(2)


@pytest.fixture
def mesh3(mesh_at):
    return mesh_at(3)


def stereographic(x, y):
    """Inverse stereographic map: B_1 onto the upper hemisphere of S^2."""
    r2 = x * x + y * y
    return np.stack([2 * x / (1 + r2), 2 * y / (1 + r2), (1 - r2) / (1 + r2)],
                    axis=-1)


def cap_boundary(mesh, m, delta, base=None):
    """Projected-circle boundary data of radius delta around the base point."""
    from heatflow.lab import _tangent_frame_at
    base = m.base_point() if base is None else base
    e1, e2 = _tangent_frame_at(m, base)
    b = mesh.boundary_idx
    th = np.arctan2(mesh.vertices[b, 1], mesh.vertices[b, 0])
    return m.project(base + delta * (np.cos(th)[:, None] * e1
                                     + np.sin(th)[:, None] * e2))

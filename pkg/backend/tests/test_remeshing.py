# backend/tests/test_remeshing.py
import numpy as np
import pytest

from shared.errors import ValidationError
from shared.mesh_core import edge_list, nearest_correspondence
from shared.remeshing import RemeshVariant, remesh, splitting_plane
from shared.synthetic_data import icosphere


def _max_edge_valence(mesh) -> int:
    f = mesh.faces
    pairs = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return int(counts.max())


class TestRemeshVariant:

    def test_parse_is_case_insensitive(self):
        """Variant names parse regardless of case"""
        assert RemeshVariant.parse("DS2") is RemeshVariant.DS2
        assert RemeshVariant.parse(" vd ") is RemeshVariant.VD

    def test_parse_unknown(self):
        """Unknown names are rejected with the valid choices"""
        with pytest.raises(ValidationError, match="original"):
            RemeshVariant.parse("ds4")


class TestRemesh:

    def test_original_is_exact_copy(self, body):
        """ORIGINAL returns identical arrays"""
        copy = remesh(body.mesh, RemeshVariant.ORIGINAL)
        assert copy.vertices.tobytes() == body.mesh.vertices.tobytes()
        assert copy.faces.tobytes() == body.mesh.faces.tobytes()

    def test_ds2_halves_vertex_count(self, body):
        """DS2 keeps between 45% and 55% of the vertices"""
        n = body.mesh.n_vertices
        result = remesh(body.mesh, RemeshVariant.DS2, seed=3)
        assert 0.45 * n <= result.n_vertices <= 0.55 * n
        assert _max_edge_valence(result) <= 2

    def test_us2_doubles_vertex_count(self, sphere):
        """US2 ends between 1.9x and 2.1x the vertices"""
        n = sphere.n_vertices
        result = remesh(sphere, RemeshVariant.US2, seed=1)
        assert 1.9 * n <= result.n_vertices <= 2.1 * n
        assert result.connected_component_count() == 1

    def test_vd_density_contrast(self):
        """The refined half has edges at least twice as short as the coarse half"""
        sphere = icosphere(3)
        center, axis = splitting_plane(sphere.vertices)
        result = remesh(sphere, RemeshVariant.VD, seed=0)
        edges = edge_list(result).edges
        a = result.vertices[edges[:, 0]]
        b = result.vertices[edges[:, 1]]
        lengths = np.linalg.norm(a - b, axis=1)
        side = 0.5 * (a + b)[:, axis] - center[axis]
        fine = lengths[side > 0.2].mean()
        coarse = lengths[side < -0.2].mean()
        assert coarse / fine >= 2.0

    def test_decimation_floor(self):
        """Decimating below ten vertices is refused"""
        with pytest.raises(ValidationError):
            remesh(icosphere(0), RemeshVariant.DS2)

    @pytest.mark.parametrize("variant", [RemeshVariant.DS2, RemeshVariant.US2, RemeshVariant.VD])
    def test_output_faces_valid(self, sphere, variant):
        """Remeshed faces stay in range and never repeat an index"""
        result = remesh(sphere, variant, seed=7)
        f = result.faces
        assert f.min() >= 0 and f.max() < result.n_vertices
        assert not np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))

    def test_seeded_remesh_is_deterministic(self, sphere):
        """Same seed, same output"""
        first = remesh(sphere, RemeshVariant.DS2, seed=5)
        second = remesh(sphere, RemeshVariant.DS2, seed=5)
        np.testing.assert_array_equal(first.faces, second.faces)

    def test_ds2_correspondence_distance(self, sphere):
        """Nearest DS2 vertices lie closer than one mean edge length"""
        coarse = remesh(sphere, RemeshVariant.DS2)
        index = nearest_correspondence(sphere, coarse)
        distance = np.linalg.norm(sphere.vertices - coarse.vertices[index], axis=1)
        assert distance.mean() < sphere.mean_edge_length()

# backend/tests/test_mesh_core.py
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from shared.errors import DegenerateMeshError, MeshFormatError, ValidationError
from shared.mesh_core import (
    MotionSequence,
    NormalizeTransform,
    TriMesh,
    edge_list,
    load_mesh,
    load_sequence,
    nearest_correspondence,
    normalize,
    save_mesh,
    save_sequence,
    vertex_normals,
)
from shared.synthetic_data import grid_mesh, icosphere

TRIANGLE = TriMesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([[0, 1, 2]]))


def _random_mesh(n: int, seed: int = 0) -> TriMesh:
    rng = np.random.default_rng(seed)
    faces = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
    return TriMesh(rng.normal(size=(n, 3)), faces)


class TestTriMesh:

    def test_invariants_enforced(self):
        """Out-of-range and repeated face indices are rejected"""
        with pytest.raises(ValidationError):
            TriMesh(TRIANGLE.vertices, np.array([[0, 1, 3]]))
        with pytest.raises(ValidationError):
            TriMesh(TRIANGLE.vertices, np.array([[0, 1, 1]]))
        with pytest.raises(ValidationError):
            TriMesh(TRIANGLE.vertices[:2], np.array([[0, 1, 0]]))

    def test_arrays_are_read_only(self):
        """A constructed mesh cannot be mutated in place"""
        with pytest.raises(ValueError):
            TRIANGLE.vertices[0, 0] = 5.0

    def test_content_hash_tracks_positions(self):
        """Moving a vertex changes the content hash"""
        moved = TRIANGLE.with_vertices(TRIANGLE.vertices + 0.1)
        assert moved.content_hash() != TRIANGLE.content_hash()
        assert TRIANGLE.with_vertices(TRIANGLE.vertices).content_hash() == TRIANGLE.content_hash()

    def test_content_hash_is_sha256(self):
        """Content hashes are 64 hex digits"""
        digest = TRIANGLE.content_hash()
        assert len(digest) == 64
        int(digest, 16)

    def test_meshes_hash_by_identity(self):
        """Meshes can be set members; equal content still gives distinct members"""
        copy = TRIANGLE.with_vertices(TRIANGLE.vertices)
        members = {TRIANGLE, copy, TRIANGLE}
        assert len(members) == 2
        assert TRIANGLE == TRIANGLE
        assert copy != TRIANGLE
        assert len({normalize(TRIANGLE)[1], edge_list(TRIANGLE)}) == 2


class TestMeshIO:

    def test_load_single_triangle_obj(self, tmp_path):
        """Smallest valid OBJ loads as one face"""
        path = tmp_path / "tri.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        mesh = load_mesh(path)
        assert mesh.n_vertices == 3
        assert mesh.n_faces == 1

    def test_obj_zero_index_is_parse_error(self, tmp_path):
        """OBJ indices are 1-based; a 0 reports the offending line"""
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(path)
        assert exc.value.line == 4

    def test_empty_file_is_validation_error(self, tmp_path):
        """A file without faces is rejected"""
        path = tmp_path / "empty.obj"
        path.write_text("# nothing here\n")
        with pytest.raises(ValidationError):
            load_mesh(path)

    @pytest.mark.parametrize("suffix", ["obj", "ply"])
    def test_round_trip_random_mesh(self, tmp_path, suffix):
        """save then load preserves vertices and faces"""
        mesh = _random_mesh(100)
        path = tmp_path / f"mesh.{suffix}"
        save_mesh(mesh, path)
        loaded = load_mesh(path)
        np.testing.assert_allclose(loaded.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)

    def test_ascii_ply(self, tmp_path):
        """ASCII PLY with extra vertex properties loads"""
        path = tmp_path / "tri.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
            "property float confidence\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0 1\n1 0 0 1\n0 1 0 1\n3 0 1 2\n"
        )
        mesh = load_mesh(path)
        np.testing.assert_allclose(mesh.vertices, TRIANGLE.vertices)

    def test_ply_non_integer_count_is_parse_error(self, tmp_path):
        """A non-numeric element count reports its header line"""
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex three\nproperty float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n"
        )
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(path)
        assert exc.value.line == 3

    def test_ply_unknown_property_type_is_parse_error(self, tmp_path):
        """An unknown binary property type is a format error, not a lookup failure"""
        path = tmp_path / "bad.ply"
        path.write_bytes(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float16 x\n"
            b"property float y\nproperty float z\nend_header\n" + np.zeros(3, dtype="<f4").tobytes()
        )
        with pytest.raises(MeshFormatError) as exc:
            load_mesh(path)
        assert exc.value.line == 4

    def test_save_to_missing_directory_raises(self, tmp_path):
        """save_mesh does not create parent directories"""
        with pytest.raises(OSError):
            save_mesh(TRIANGLE, tmp_path / "missing" / "tri.obj")

    def test_save_6890_vertices_writes_every_record(self, tmp_path):
        """A 6890-vertex mesh produces 6890 v records"""
        mesh = grid_mesh(64, 105)
        assert mesh.n_vertices == 6890
        path = tmp_path / "big.obj"
        save_mesh(mesh, path)
        lines = path.read_text().splitlines()
        assert sum(1 for line in lines if line.startswith("v ")) == 6890

    def test_sequence_round_trip(self, tmp_path):
        """Frames are written and read back in numeric order"""
        frames = [TRIANGLE.with_vertices(TRIANGLE.vertices + i) for i in range(12)]
        save_sequence(MotionSequence(frames, name="shift"), tmp_path / "motion")
        loaded = load_sequence(tmp_path / "motion")
        assert len(loaded) == 12
        assert loaded.is_registered
        np.testing.assert_allclose(loaded.frames[11].vertices, frames[11].vertices, atol=1e-6)

    def test_sequence_without_frames(self, tmp_path):
        """A directory with no frame files is rejected"""
        with pytest.raises(ValidationError):
            load_sequence(tmp_path)


class TestVertexNormals:

    def test_flat_grid_points_up(self):
        """Planar z=0 grid has +z normals everywhere"""
        normals = vertex_normals(grid_mesh(5, 5))
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (36, 1)), atol=1e-12)

    def test_sphere_normals_radial(self, sphere):
        """Icosphere normals align with the radial direction"""
        normals = vertex_normals(sphere)
        radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
        assert np.all(np.sum(normals * radial, axis=1) > 0.99)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-6)

    def test_mirror_equivariance(self, sphere):
        """Negating x and flipping winding mirrors the normals"""
        mirrored = TriMesh(sphere.vertices * np.array([-1.0, 1.0, 1.0]), sphere.faces[:, ::-1])
        expected = vertex_normals(sphere) * np.array([-1.0, 1.0, 1.0])
        np.testing.assert_allclose(vertex_normals(mirrored), expected, atol=1e-10)

    def test_rotation_equivariance(self, sphere):
        """Rotating the mesh rotates its normals"""
        R = Rotation.from_euler("xyz", [0.3, -0.7, 1.1]).as_matrix()
        rotated = sphere.with_vertices(sphere.vertices @ R.T)
        assert np.max(np.abs(vertex_normals(rotated) - vertex_normals(sphere) @ R.T)) < 1e-5

    def test_isolated_vertex_flagged(self):
        """A vertex without faces gets a zero normal and a flag"""
        vertices = np.vstack([TRIANGLE.vertices, [[5.0, 5.0, 5.0]]])
        normals, flags = vertex_normals(TriMesh(vertices, TRIANGLE.faces), return_flags=True)
        assert flags.tolist() == [False, False, False, True]
        np.testing.assert_array_equal(normals[3], np.zeros(3))


class TestEdgeList:

    def test_single_triangle(self):
        """One triangle has three edges"""
        assert len(edge_list(TRIANGLE)) == 3

    def test_two_triangles_share_edge(self):
        """Two triangles sharing an edge have five edges"""
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        mesh = TriMesh(vertices, np.array([[0, 1, 2], [1, 3, 2]]))
        assert len(edge_list(mesh)) == 5

    def test_euler_formula_closed_mesh(self, sphere):
        """Genus-0 closed mesh: E = V + F - 2"""
        assert len(edge_list(sphere)) == sphere.n_vertices + sphere.n_faces - 2

    def test_independent_of_face_order(self, sphere):
        """Shuffling faces leaves the edge list unchanged"""
        order = np.random.default_rng(1).permutation(sphere.n_faces)
        shuffled = TriMesh(sphere.vertices, sphere.faces[order])
        np.testing.assert_array_equal(edge_list(shuffled).edges, edge_list(sphere).edges)


class TestNormalize:

    def test_unit_diagonal_and_inverse(self, sphere):
        """Normalized mesh has unit diagonal and the transform inverts exactly"""
        normalized, transform = normalize(sphere)
        assert normalized.bounding_box_diagonal() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(normalized.vertices.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(transform.invert(normalized.vertices), sphere.vertices, rtol=1e-12, atol=1e-12)

    def test_already_normalized_is_identity(self, sphere):
        """Normalizing twice gives a scale-1 transform"""
        once, _ = normalize(sphere)
        _, transform = normalize(once)
        assert transform.scale == pytest.approx(1.0, abs=1e-9)

    def test_scale_and_shift_invariance(self, sphere):
        """Scaled and shifted copies normalize to the same mesh"""
        moved = sphere.with_vertices(sphere.vertices * 5.0 + np.array([3.0, -2.0, 7.0]))
        np.testing.assert_allclose(normalize(moved)[0].vertices, normalize(sphere)[0].vertices, atol=1e-12)

    def test_repeated_point_is_degenerate(self):
        """All vertices at one point cannot be normalized"""
        with pytest.raises(DegenerateMeshError):
            normalize(TriMesh(np.ones((3, 3)), np.array([[0, 1, 2]])))

    def test_transform_dict_round_trip(self):
        """Transforms serialize to plain lists"""
        transform = NormalizeTransform(np.array([1.0, 2.0, 3.0]), 2.5)
        restored = NormalizeTransform.from_dict(transform.to_dict())
        np.testing.assert_array_equal(restored.translation, transform.translation)
        assert restored.scale == 2.5

    def test_non_positive_scale_rejected(self):
        """Scale must be positive"""
        with pytest.raises(ValidationError):
            NormalizeTransform(np.zeros(3), 0.0)


class TestNearestCorrespondence:

    def test_identical_meshes(self, sphere):
        """Identical meshes map each vertex to itself"""
        np.testing.assert_array_equal(nearest_correspondence(sphere, sphere), np.arange(sphere.n_vertices))

    def test_reversed_vertices(self, sphere):
        """Reversing vertex order gives the reversal permutation"""
        n = sphere.n_vertices
        reversed_mesh = TriMesh(sphere.vertices[::-1], (n - 1) - sphere.faces)
        np.testing.assert_array_equal(nearest_correspondence(sphere, reversed_mesh), np.arange(n)[::-1])


class TestMotionSequence:

    def test_unregistered_vertex_array_rejected(self, sphere):
        """Varying topology has no vertex array"""
        sequence = MotionSequence([sphere, icosphere(1)])
        assert not sequence.is_registered
        with pytest.raises(ValidationError):
            sequence.vertex_array()

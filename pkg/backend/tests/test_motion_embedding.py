# backend/tests/test_motion_embedding.py
import numpy as np
import pandas as pd
import pytest
import torch

from shared.errors import DegenerateMeshError, NumericalError, ValidationError
from shared.mesh_core import MotionSequence, TriMesh
from shared.motion_embedding import (
    MotionCode,
    MotionEmbedder,
    distance_matrix_correlation,
    embed_motion,
    embed_points,
    encode_frame,
    export_codes_csv,
    export_mds_csv,
    mds_project,
    sample_points,
    sample_sequence,
)

UNIT_SQUARE = TriMesh(
    np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]),
    np.array([[0, 1, 2], [0, 2, 3]]),
)


@pytest.fixture
def embedder():
    torch.manual_seed(0)
    return MotionEmbedder(code_dim=8, hidden=16, n_recurrent_layers=2)


class TestSamplePoints:

    def test_square_centroid(self):
        """Uniform samples on the unit square average to its centroid"""
        points = sample_points(UNIT_SQUARE, 10000, seed=0)
        np.testing.assert_allclose(points.mean(axis=0), [0.5, 0.5, 0.0], atol=0.02)

    def test_samples_inside_triangle(self):
        """Every sample on a single triangle has nonnegative barycentrics"""
        triangle = TriMesh(UNIT_SQUARE.vertices[:3], np.array([[0, 1, 2]]))
        points = sample_points(triangle, 500, seed=3)
        # triangle (0,0) (1,0) (1,1): 0 <= y <= x <= 1
        assert np.all(points[:, 1] >= -1e-12)
        assert np.all(points[:, 1] <= points[:, 0] + 1e-12)
        assert np.all(points[:, 0] <= 1.0 + 1e-12)

    def test_seeded(self):
        """Same seed, same samples; different seed, different samples"""
        np.testing.assert_array_equal(sample_points(UNIT_SQUARE, 64, 7), sample_points(UNIT_SQUARE, 64, 7))
        assert not np.array_equal(sample_points(UNIT_SQUARE, 64, 7), sample_points(UNIT_SQUARE, 64, 8))

    def test_minimum_count(self):
        """Fewer than 16 samples is rejected"""
        with pytest.raises(ValidationError):
            sample_points(UNIT_SQUARE, 8, 0)

    def test_zero_area(self):
        """Collinear triangles have no area to sample"""
        flat = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))
        with pytest.raises(DegenerateMeshError):
            sample_points(flat, 32, 0)


class TestEncodeFrame:

    def test_permutation_invariant(self, embedder):
        """Shuffling the points leaves the code unchanged"""
        points = np.random.default_rng(0).normal(size=(64, 3))
        shuffled = points[np.random.default_rng(1).permutation(64)]
        assert torch.equal(encode_frame(points, embedder), encode_frame(shuffled, embedder))

    def test_duplicate_invariant(self, embedder):
        """Repeating every point leaves the code unchanged"""
        points = np.random.default_rng(0).normal(size=(32, 3))
        assert torch.equal(encode_frame(points, embedder), encode_frame(np.concatenate([points, points]), embedder))

    def test_non_finite_rejected(self, embedder):
        """NaN coordinates raise a numerical error"""
        points = np.zeros((20, 3))
        points[3, 1] = np.nan
        with pytest.raises(NumericalError):
            encode_frame(points, embedder)

    def test_bare_frame_encoder(self, embedder):
        """A frame encoder on its own gives the same code as the embedder holding it"""
        points = np.random.default_rng(2).normal(size=(48, 3))
        code = encode_frame(points, embedder.frame_encoder)
        assert tuple(code.shape) == (8,)
        assert torch.equal(code, encode_frame(points, embedder))


class TestEmbedMotion:

    def test_shape(self, embedder, sphere):
        """T frames give a T x d code"""
        frames = [sphere.with_vertices(sphere.vertices * (1 + 0.1 * t)) for t in range(6)]
        code = embed_motion(MotionSequence(frames, name="grow"), embedder, n=64, seed=0)
        assert tuple(code.values.shape) == (6, 8)
        assert code.name == "grow"
        assert len(code) == 6 and code.dim == 8

    def test_single_frame(self, embedder, sphere):
        """T = 1 equals the recurrent stack applied to one step"""
        points = sample_sequence(MotionSequence([sphere]), 64, seed=2)
        code = embed_points(points, embedder)
        with torch.no_grad():
            frame_code = embedder.frame_encoder(torch.as_tensor(points, dtype=torch.float32))
            expected = embedder.smooth(frame_code)
        assert code.shape == (1, 8)
        torch.testing.assert_close(code.detach(), expected)

    def test_constant_sequence_frame_codes_equal(self, embedder, sphere):
        """Identical frames sampled identically give identical per-frame codes"""
        points = sample_points(sphere, 64, seed=0)
        stacked = torch.as_tensor(np.stack([points] * 5), dtype=torch.float32)
        with torch.no_grad():
            frame_codes = embedder.frame_encoder(stacked)
        for t in range(1, 5):
            assert torch.equal(frame_codes[t], frame_codes[0])
        assert torch.all(torch.isfinite(embed_points(stacked, embedder)))

    def test_without_recurrent_stack(self, sphere):
        """Disabling the recurrent stack returns per-frame codes"""
        torch.manual_seed(0)
        embedder = MotionEmbedder(code_dim=8, hidden=16, use_recurrent=False)
        points = sample_sequence(MotionSequence([sphere, sphere]), 32, seed=0)
        with torch.no_grad():
            expected = embedder.frame_encoder(torch.as_tensor(points, dtype=torch.float32))
        torch.testing.assert_close(embed_points(points, embedder).detach(), expected)

    def test_unregistered_frames(self, embedder, sphere, small_sphere):
        """Frames with different vertex counts embed together"""
        code = embed_motion(MotionSequence([sphere, small_sphere, sphere]), embedder, n=32, seed=0)
        assert len(code) == 3

    def test_empty_sequence(self, embedder):
        """An empty sequence cannot be embedded"""
        with pytest.raises(ValidationError):
            embed_motion(MotionSequence([]), embedder)

    def test_gradients_match_finite_differences(self, double_precision):
        """Autograd through the embedder matches central differences"""
        embedder = MotionEmbedder(code_dim=3, hidden=4, n_recurrent_layers=1)
        points = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 16, 3)))
        embedder.zero_grad()
        embedder(points).pow(2).sum().backward()
        rng = np.random.default_rng(1)
        step = 1e-5
        for name, parameter in embedder.named_parameters():
            flat = parameter.data.view(-1)
            index = int(rng.integers(flat.numel()))
            analytic = float(parameter.grad.view(-1)[index])
            with torch.no_grad():
                original = float(flat[index])
                flat[index] = original + step
                plus = float(embedder(points).pow(2).sum())
                flat[index] = original - step
                minus = float(embedder(points).pow(2).sum())
                flat[index] = original
            numeric = (plus - minus) / (2 * step)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1.0), name


class TestMdsProject:

    def test_right_triangle(self):
        """A 3-4-5 triangle in 5D keeps its side lengths"""
        codes = np.zeros((3, 5))
        codes[1, 0] = 3.0
        codes[2, 3] = 4.0
        (points,) = mds_project([codes])
        sides = sorted(np.linalg.norm(points[i] - points[j]) for i, j in [(0, 1), (1, 2), (0, 2)])
        np.testing.assert_allclose(sides, [3.0, 4.0, 5.0], atol=1e-6)

    def test_planar_codes_preserve_distances(self):
        """Codes on a 2D plane are embedded isometrically"""
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.normal(size=(8, 2)))[0]
        planar = rng.normal(size=(12, 2)) @ basis.T + 3.0
        trajectories = mds_project([MotionCode(torch.as_tensor(planar[:5])), MotionCode(torch.as_tensor(planar[5:]))])
        assert [len(t) for t in trajectories] == [5, 7]
        embedded = np.concatenate(trajectories)
        original = np.linalg.norm(planar[:, None] - planar[None], axis=-1)
        recovered = np.linalg.norm(embedded[:, None] - embedded[None], axis=-1)
        np.testing.assert_allclose(recovered, original, atol=1e-6)

    def test_identical_codes_at_origin(self):
        """Identical codes collapse to the origin"""
        (points,) = mds_project([np.ones((4, 6))])
        np.testing.assert_allclose(points, 0.0, atol=1e-9)

    def test_too_few_rows(self):
        """A single row cannot be projected"""
        with pytest.raises(ValidationError):
            mds_project([np.ones((1, 4))])


class TestExports:

    def test_codes_csv(self, tmp_path):
        """Codes export as T rows by d columns"""
        path = export_codes_csv(MotionCode(torch.arange(12.0).reshape(3, 4)), tmp_path / "codes.csv")
        table = pd.read_csv(path, index_col="frame")
        assert table.shape == (3, 4)
        assert list(table.columns) == ["z0", "z1", "z2", "z3"]

    def test_mds_csv(self, tmp_path):
        """MDS polylines export one row per frame"""
        path = export_mds_csv([np.zeros((2, 2)), np.ones((3, 2))], ["walk", "run"], tmp_path / "mds.csv")
        table = pd.read_csv(path)
        assert len(table) == 5
        assert table[table.motion == "run"].frame.tolist() == [0, 1, 2]

    def test_distance_matrix_correlation_of_scaled_codes(self):
        """Uniformly scaled codes correlate perfectly"""
        codes = np.random.default_rng(0).normal(size=(6, 4))
        assert distance_matrix_correlation([codes], [2.0 * codes]) == pytest.approx(1.0)

# backend/tests/test_deformation_generator.py
import json

import numpy as np
import pytest
import torch

from shared.deformation_generator import DeformationGenerator, augment, export_rollout, rollout, step
from shared.errors import NumericalError, ValidationError
from shared.feature_extractor import FeatureField
from shared.mesh_core import NormalizeTransform, TriMesh, load_sequence
from shared.motion_embedding import MotionCode


def _randomize(generator: DeformationGenerator, seed: int = 0) -> DeformationGenerator:
    torch.manual_seed(seed)
    with torch.no_grad():
        for parameter in generator.parameters():
            parameter.normal_(0.0, 0.3)
    return generator


def _small_source(n: int = 20, seed: int = 0) -> TriMesh:
    rng = np.random.default_rng(seed)
    faces = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
    return TriMesh(rng.normal(size=(n, 3)), faces)


class TestAugment:

    def test_definitional_row(self):
        """Row i is (features, code, previous position)"""
        row = augment(torch.tensor([[1.0, 2.0]]), torch.tensor([3.0, 4.0]), torch.tensor([[5.0, 6.0, 7.0]]))
        assert row.tolist() == [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]]

    def test_zero_code(self):
        """A zero code zeroes only the middle block"""
        features = torch.randn(10, 4)
        prev = torch.randn(10, 3)
        out = augment(FeatureField(features), torch.zeros(5), prev)
        assert torch.equal(out[:, :4], features)
        assert torch.count_nonzero(out[:, 4:9]) == 0
        assert torch.equal(out[:, 9:], prev)

    def test_shape(self):
        """N = 1000 gives 1000 x (F + d + 3)"""
        out = augment(torch.zeros(1000, 64), torch.zeros(64), torch.zeros(1000, 3))
        assert tuple(out.shape) == (1000, 131)

    def test_row_count_mismatch(self):
        """Feature and position rows must agree"""
        with pytest.raises(ValidationError):
            augment(torch.zeros(10, 4), torch.zeros(2), torch.zeros(9, 3))


class TestStep:

    def test_zero_initialized_output(self):
        """A fresh generator predicts zero displacement"""
        generator = DeformationGenerator(feature_dim=4, code_dim=2, hidden=8)
        out = step(torch.randn(30, 9), generator)
        assert torch.count_nonzero(out) == 0

    def test_row_permutation(self):
        """Permuting rows permutes displacements"""
        generator = _randomize(DeformationGenerator(feature_dim=4, code_dim=2, hidden=8))
        augmented = torch.randn(25, 9)
        perm = torch.randperm(25)
        torch.testing.assert_close(step(augmented[perm], generator), step(augmented, generator)[perm])

    def test_width_mismatch(self):
        """Wrong input width is rejected"""
        with pytest.raises(ValidationError):
            step(torch.zeros(5, 8), DeformationGenerator(feature_dim=4, code_dim=2))

    def test_non_finite(self):
        """NaN input yields a numerical error"""
        generator = _randomize(DeformationGenerator(feature_dim=1, code_dim=1, hidden=4))
        with pytest.raises(NumericalError):
            step(torch.full((3, 5), float("nan")), generator)

    def test_gradient_matches_finite_differences(self, double_precision):
        """Autograd of the squared displacement norm matches central differences"""
        generator = _randomize(DeformationGenerator(feature_dim=3, code_dim=2, hidden=6, n_layers=2))
        augmented = torch.randn(12, 8)
        generator.zero_grad()
        step(augmented, generator).pow(2).sum().backward()
        step_size = 1e-6
        for name, parameter in generator.named_parameters():
            flat = parameter.data.view(-1)
            analytic = float(parameter.grad.view(-1)[0])
            with torch.no_grad():
                original = float(flat[0])
                flat[0] = original + step_size
                plus = float(step(augmented, generator).pow(2).sum())
                flat[0] = original - step_size
                minus = float(step(augmented, generator).pow(2).sum())
                flat[0] = original
            numeric = (plus - minus) / (2 * step_size)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1.0), name


class TestRollout:

    def test_zero_params_static(self):
        """Zero-initialized decoder keeps every frame at the source"""
        source = _small_source()
        generator = DeformationGenerator(feature_dim=4, code_dim=3, hidden=8)
        result = rollout(source, torch.randn(20, 4), torch.randn(6, 3), generator)
        assert result.n_frames == 6
        for t in range(7):
            np.testing.assert_allclose(result.frame(t), source.vertices, atol=1e-6)

    def test_empty_code(self):
        """T = 0 returns only the source frame"""
        source = _small_source()
        result = rollout(source, torch.randn(20, 4), torch.zeros(0, 3), DeformationGenerator(feature_dim=4, code_dim=3))
        assert tuple(result.positions.shape) == (1, 20, 3)
        assert tuple(result.displacements.shape) == (0, 20, 3)

    def test_telescoping(self, double_precision):
        """Last frame minus source equals the summed displacements"""
        source = _small_source()
        generator = _randomize(DeformationGenerator(feature_dim=4, code_dim=3, hidden=8), seed=1)
        with torch.no_grad():
            for parameter in generator.parameters():
                parameter.mul_(0.3)
        result = rollout(source, torch.randn(20, 4), torch.randn(8, 3), generator)
        total = result.displacements.sum(dim=0)
        assert torch.max(torch.abs(result.positions[-1] - result.positions[0] - total)) < 1e-6
        for t in range(1, 9):
            assert torch.equal(result.positions[t], result.positions[t - 1] + result.displacements[t - 1])

    def test_deterministic(self):
        """Same inputs, same rollout"""
        source = _small_source()
        generator = _randomize(DeformationGenerator(feature_dim=4, code_dim=3, hidden=8))
        features = torch.randn(20, 4)
        code = MotionCode(torch.randn(5, 3))
        first = rollout(source, features, code, generator).positions
        second = rollout(source, features, code, generator).positions
        assert torch.equal(first, second)

    def test_vertex_permutation_equivariance(self):
        """Permuting source vertices permutes every rollout frame"""
        source = _small_source()
        perm = np.random.default_rng(2).permutation(20)
        inverse = np.argsort(perm)
        permuted = TriMesh(source.vertices[perm], inverse[source.faces])
        generator = _randomize(DeformationGenerator(feature_dim=4, code_dim=3, hidden=8))
        features = torch.randn(20, 4)
        code = torch.randn(4, 3)
        original = rollout(source, features, code, generator).positions
        moved = rollout(permuted, features[perm], code, generator).positions
        torch.testing.assert_close(moved, original[:, perm])

    def test_backprop_through_time(self, double_precision):
        """Gradients through a 5-step rollout match central differences"""
        source = _small_source()
        generator = _randomize(DeformationGenerator(feature_dim=2, code_dim=2, hidden=6, n_layers=2), seed=3)
        with torch.no_grad():
            for parameter in generator.parameters():
                parameter.mul_(0.5)
        features = torch.randn(20, 2)
        code = torch.randn(5, 2)

        def readout():
            return rollout(source, features, code, generator).positions.pow(2).sum()

        generator.zero_grad()
        readout().backward()
        parameters = list(generator.parameters())
        rng = np.random.default_rng(4)
        step_size = 1e-6
        for _ in range(10):
            parameter = parameters[int(rng.integers(len(parameters)))]
            flat = parameter.data.view(-1)
            index = int(rng.integers(flat.numel()))
            analytic = float(parameter.grad.view(-1)[index])
            with torch.no_grad():
                original = float(flat[index])
                flat[index] = original + step_size
                plus = float(readout())
                flat[index] = original - step_size
                minus = float(readout())
                flat[index] = original
            numeric = (plus - minus) / (2 * step_size)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1.0)

    def test_teacher_forcing_restarts_from_truth(self):
        """With teacher frames, step t starts from ground-truth frame t - 1"""
        source = _small_source()
        generator = DeformationGenerator(feature_dim=4, code_dim=3, hidden=8)
        truth = torch.randn(3, 20, 3)
        result = rollout(source, torch.randn(20, 4), torch.randn(3, 3), generator, teacher_frames=truth)
        # zero decoder: frame t repeats its starting point
        torch.testing.assert_close(result.positions[2], truth[0])
        torch.testing.assert_close(result.positions[3], truth[1])

    def test_feature_rows_must_match_source(self):
        """Features for another mesh are rejected"""
        with pytest.raises(ValidationError):
            rollout(_small_source(), torch.randn(19, 4), torch.randn(2, 3), DeformationGenerator(feature_dim=4, code_dim=3))


class TestExportRollout:

    def test_frames_and_manifest(self, tmp_path):
        """Exported frames are de-normalized and the manifest records the transform"""
        source = _small_source()
        generator = DeformationGenerator(feature_dim=4, code_dim=3)
        result = rollout(source, torch.randn(20, 4), torch.randn(4, 3), generator)
        transform = NormalizeTransform(np.array([1.0, 2.0, 3.0]), 2.0)
        path = export_rollout(result, source, tmp_path / "out", transform, source_file="a.obj", checkpoint_id="abc")
        manifest = json.loads(path.read_text())
        assert manifest["frame_count"] == 4
        assert manifest["checkpoint_id"] == "abc"
        assert manifest["normalization"] == {"translation": [1.0, 2.0, 3.0], "scale": 2.0}
        frames = load_sequence(tmp_path / "out")
        assert len(frames) == 4
        np.testing.assert_allclose(frames.frames[0].vertices, source.vertices * 2.0 + [1.0, 2.0, 3.0], atol=1e-6)

# backend/shared/motion_embedding.py
"""
Motion embedding: every frame of a (possibly unregistered) target sequence is
sampled into a point set, encoded by a shared per-point perceptron with max
pooling, and the per-frame codes are smoothed by a bidirectional GRU stack.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from scipy import stats
from scipy.spatial.distance import pdist, squareform

from .errors import DegenerateMeshError, NumericalError, ValidationError
from .mesh_core import MotionSequence, TriMesh
from .utils import init_leaky_layers

logger = logging.getLogger(__name__)

MIN_SAMPLES = 16


@dataclass
class MotionCode:
    """T x d vector time series describing a motion"""
    values: torch.Tensor
    name: Optional[str] = None

    def __len__(self):
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


def sample_points(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform samples on the surface"""
    if n < MIN_SAMPLES:
        raise ValidationError(f"need at least {MIN_SAMPLES} samples per frame, got {n}")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if not total > 0:
        raise DegenerateMeshError(f"mesh {mesh.name!r} has zero surface area")
    rng = np.random.default_rng(seed)
    face_ids = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face_ids]]
    return ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2])


def frame_seed(seed: int, index: int) -> int:
    return int(seed) * 100003 + int(index)


class FrameEncoder(nn.Module):
    """Shared point perceptron (4 x hidden, LeakyReLU) then max pooling to d"""

    def __init__(self, code_dim: int = 64, hidden: int = 128, n_layers: int = 4):
        super().__init__()
        layers = []
        width = 3
        for _ in range(n_layers):
            layers.extend([nn.Linear(width, hidden), nn.LeakyReLU()])
            width = hidden
        layers.append(nn.Linear(width, code_dim))
        self.point_mlp = nn.Sequential(*layers)
        init_leaky_layers(self.point_mlp)
        self.code_dim = code_dim

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        # points: (..., n, 3) -> (..., d)
        return self.point_mlp(points).max(dim=-2).values


class MotionEmbedder(nn.Module):
    def __init__(
        self,
        code_dim: int = 64,
        hidden: int = 128,
        n_recurrent_layers: int = 3,
        use_recurrent: bool = True,
    ):
        super().__init__()
        self.code_dim = code_dim
        self.use_recurrent = use_recurrent
        self.frame_encoder = FrameEncoder(code_dim=code_dim, hidden=hidden)
        self.recurrent = nn.GRU(
            input_size=code_dim,
            hidden_size=hidden,
            num_layers=n_recurrent_layers,
            batch_first=True,
            bidirectional=True,
        )
        self.projection = nn.Linear(2 * hidden, code_dim)

    def smooth(self, frame_codes: torch.Tensor) -> torch.Tensor:
        """T x d per-frame codes -> T x d smoothed codes"""
        if not self.use_recurrent:
            return frame_codes
        output, _ = self.recurrent(frame_codes.unsqueeze(0))
        return self.projection(output.squeeze(0))

    def forward(self, frame_points: torch.Tensor) -> torch.Tensor:
        """T x n x 3 sampled frames -> T x d codes"""
        return self.smooth(self.frame_encoder(frame_points))


def encode_frame(points, params: Union[MotionEmbedder, FrameEncoder]) -> torch.Tensor:
    """Permutation-invariant d-vector of one point set"""
    encoder = params.frame_encoder if isinstance(params, MotionEmbedder) else params
    dtype = next(encoder.parameters()).dtype
    points = torch.as_tensor(np.asarray(points) if not isinstance(points, torch.Tensor) else points, dtype=dtype)
    if not torch.all(torch.isfinite(points)):
        raise NumericalError("non-finite input points", stage="encode_frame")
    return encoder(points)


def sample_sequence(sequence: MotionSequence, n: int, seed: int) -> np.ndarray:
    """T x n x 3 surface samples, frame t drawn with its own seed"""
    if len(sequence) == 0:
        raise ValidationError("cannot embed an empty motion sequence")
    return np.stack([sample_points(frame, n, frame_seed(seed, t)) for t, frame in enumerate(sequence.frames)])


def embed_points(frame_points, params: MotionEmbedder) -> torch.Tensor:
    dtype = params.projection.weight.dtype
    device = params.projection.weight.device
    points = torch.as_tensor(frame_points, dtype=dtype, device=device)
    codes = params(points)
    if not torch.all(torch.isfinite(codes)):
        raise NumericalError("non-finite motion code", stage="embed_motion")
    return codes


def embed_motion(sequence: MotionSequence, params: MotionEmbedder, n: int = 1024, seed: int = 0) -> MotionCode:
    """Motion code of a target sequence (T x d)"""
    points = sample_sequence(sequence, n, seed)
    return MotionCode(embed_points(points, params), name=sequence.name)


def mds_project(codes: Sequence[Union[MotionCode, np.ndarray]]) -> List[np.ndarray]:
    """Classical MDS of all code rows jointly; one 2D polyline per motion"""
    arrays = [c.numpy() if isinstance(c, MotionCode) else np.asarray(c, dtype=np.float64) for c in codes]
    lengths = [len(a) for a in arrays]
    if sum(lengths) < 2:
        raise ValidationError("MDS needs at least two code rows in total")
    stacked = np.concatenate(arrays, axis=0).astype(np.float64)
    squared = squareform(pdist(stacked, "sqeuclidean"))
    n = squared.shape[0]
    centering = np.eye(n) - np.ones((n, n)) / n
    gram = -0.5 * centering @ squared @ centering
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:2]
    evals = np.clip(evals[order], 0.0, None)
    coords = evecs[:, order] * np.sqrt(evals)[None, :]
    if coords.shape[1] < 2:
        coords = np.concatenate([coords, np.zeros((n, 2 - coords.shape[1]))], axis=1)
    splits = np.cumsum(lengths)[:-1]
    return np.split(coords, splits)


def distance_matrix_correlation(codes_a: Sequence[MotionCode], codes_b: Sequence[MotionCode]) -> float:
    """Pearson correlation between the pairwise code-distance matrices of two embeddings"""
    a = np.concatenate([c.numpy() if isinstance(c, MotionCode) else np.asarray(c) for c in codes_a])
    b = np.concatenate([c.numpy() if isinstance(c, MotionCode) else np.asarray(c) for c in codes_b])
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"code row counts differ: {a.shape[0]} vs {b.shape[0]}")
    result = stats.pearsonr(pdist(a), pdist(b))
    return float(result[0])


def export_codes_csv(code: MotionCode, path: Union[str, Path]) -> Path:
    path = Path(path)
    values = code.numpy()
    frame = pd.DataFrame(values, columns=[f"z{i}" for i in range(values.shape[1])])
    frame.index.name = "frame"
    frame.to_csv(path)
    return path


def export_mds_csv(trajectories: Sequence[np.ndarray], names: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    rows = []
    for name, polyline in zip(names, trajectories):
        for t, (x, y) in enumerate(polyline):
            rows.append({"motion": name, "frame": t, "x": float(x), "y": float(y)})
    pd.DataFrame(rows, columns=["motion", "frame", "x", "y"]).to_csv(path, index=False)
    return path

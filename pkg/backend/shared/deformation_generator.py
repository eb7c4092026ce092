# backend/shared/deformation_generator.py
"""
Recursive per-vertex decoder: at every step the feature field is augmented
with the current motion code row and the previous positions, and a shared
perceptron predicts a displacement that is added to the previous frame.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError, ValidationError
from .feature_extractor import FeatureField
from .mesh_core import NormalizeTransform, TriMesh, save_mesh
from .motion_embedding import MotionCode
from .utils import frame_filename, init_leaky_layers

logger = logging.getLogger(__name__)


@dataclass
class DeformationRollout:
    """positions: (T+1) x N x 3 with index 0 the source; displacements: T x N x 3"""
    positions: torch.Tensor
    displacements: torch.Tensor

    @property
    def n_frames(self) -> int:
        return int(self.displacements.shape[0])

    def frame(self, t: int) -> np.ndarray:
        return self.positions[t].detach().cpu().numpy().astype(np.float64)


class DeformationGenerator(nn.Module):
    """Shared perceptron (F + d + 3) -> hidden x n_layers -> 3"""

    def __init__(self, feature_dim: int = 64, code_dim: int = 64, hidden: int = 128, n_layers: int = 4):
        super().__init__()
        self.feature_dim = feature_dim
        self.code_dim = code_dim
        self.in_width = feature_dim + code_dim + 3
        layers = []
        width = self.in_width
        for _ in range(n_layers):
            layers.extend([nn.Linear(width, hidden), nn.LeakyReLU()])
            width = hidden
        self.hidden = nn.Sequential(*layers)
        init_leaky_layers(self.hidden)
        self.out = nn.Linear(width, 3)
        # identity deformation at initialisation
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, augmented: torch.Tensor) -> torch.Tensor:
        return self.out(self.hidden(augmented))


def _values(features) -> torch.Tensor:
    return features.values if isinstance(features, FeatureField) else torch.as_tensor(features)


def augment(features, code_t, prev_positions) -> torch.Tensor:
    """Row i = (f_i, code_t, prev_positions[i])"""
    f = _values(features)
    code_t = torch.as_tensor(code_t, dtype=f.dtype, device=f.device)
    prev = torch.as_tensor(prev_positions, dtype=f.dtype, device=f.device)
    if f.ndim != 2 or prev.ndim != 2 or prev.shape[1] != 3:
        raise ValidationError(f"expected N x F features and N x 3 positions, got {tuple(f.shape)} and {tuple(prev.shape)}")
    if prev.shape[0] != f.shape[0]:
        raise ValidationError(f"feature rows ({f.shape[0]}) and positions ({prev.shape[0]}) differ")
    if code_t.ndim != 1:
        raise ValidationError(f"motion code row must be a vector, got shape {tuple(code_t.shape)}")
    tiled = code_t.unsqueeze(0).expand(f.shape[0], -1)
    return torch.cat([f, tiled, prev], dim=1)


def step(augmented: torch.Tensor, params: DeformationGenerator) -> torch.Tensor:
    """One displacement field from an augmented field"""
    if augmented.shape[-1] != params.in_width:
        raise ValidationError(f"augmented width {augmented.shape[-1]} does not match generator input {params.in_width}")
    displacement = params(augmented)
    if not torch.all(torch.isfinite(displacement)):
        raise NumericalError("non-finite displacement", stage="step")
    return displacement


def rollout(
    source: TriMesh,
    features,
    code: Union[MotionCode, torch.Tensor],
    params: DeformationGenerator,
    teacher_frames: Optional[torch.Tensor] = None,
) -> DeformationRollout:
    """
    Free rollout from the source vertices.

    With teacher_frames (T x N x 3), step t starts from the ground-truth
    frame t-1 instead of the prediction.
    """
    f = _values(features)
    codes = code.values if isinstance(code, MotionCode) else torch.as_tensor(code)
    codes = codes.to(dtype=f.dtype, device=f.device)
    if f.shape[0] != source.n_vertices:
        raise ValidationError(f"features have {f.shape[0]} rows, source has {source.n_vertices} vertices")

    current = torch.as_tensor(source.vertices, dtype=f.dtype, device=f.device)
    positions = [current]
    displacements = []
    for t in range(1, codes.shape[0] + 1):
        base = current
        if teacher_frames is not None and t > 1:
            base = torch.as_tensor(teacher_frames[t - 2], dtype=f.dtype, device=f.device)
        try:
            delta = step(augment(f, codes[t - 1], base), params)
        except NumericalError as e:
            raise NumericalError(f"non-finite displacement at frame {t}", stage=f"rollout t={t}") from e
        current = base + delta
        displacements.append(delta)
        positions.append(current)

    if displacements:
        displacement_tensor = torch.stack(displacements)
    else:
        displacement_tensor = f.new_zeros((0, source.n_vertices, 3))
    return DeformationRollout(positions=torch.stack(positions), displacements=displacement_tensor)


def export_rollout(
    result: DeformationRollout,
    source: TriMesh,
    directory: Union[str, Path],
    transform: Optional[NormalizeTransform] = None,
    extension: str = "obj",
    source_file: Optional[str] = None,
    checkpoint_id: Optional[str] = None,
) -> Path:
    """Write frame_XXXX files (predicted frames 1..T) and manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    transform = transform or NormalizeTransform.identity()
    for t in range(1, result.n_frames + 1):
        mesh = transform.invert_mesh(source.with_vertices(result.frame(t)))
        save_mesh(mesh, directory / frame_filename(t - 1, extension))
    manifest = {
        "frame_count": result.n_frames,
        "source_file": source_file,
        "checkpoint_id": checkpoint_id,
        "normalization": transform.to_dict(),
        "extension": extension,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    logger.info(f"Exported {result.n_frames} frames to {directory}")
    return path

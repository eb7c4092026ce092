# backend/shared/losses_metrics.py
"""
Training losses and evaluation metrics.

All losses take torch tensors so they back-propagate into the rollout; the
metric helpers at the bottom turn them into plain floats for reports.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from .errors import DegenerateMeshError, ValidationError
from .mesh_core import EdgeList, TriMesh, edge_list

logger = logging.getLogger(__name__)

MIN_EDGE_LENGTH = 1e-9
ZERO_NORMAL = 1e-12


class LossWeights(BaseModel):
    """Regulariser weights; the AIAP term switches on at lambda_i_start_fraction of training"""
    lambda_n: float = Field(default=1e-4, ge=0.0)
    lambda_i: float = Field(default=1e-5, ge=0.0)
    lambda_i_start_fraction: float = Field(default=0.8, ge=0.0, le=1.0)


class SequenceMetrics(BaseModel):
    sequence: str
    identity: Optional[str] = None
    mse: Optional[float] = Field(default=None, ge=0.0)
    cosim: Optional[float] = Field(default=None, ge=0.0)
    chamfer: Optional[float] = Field(default=None, ge=0.0)
    static_mse: Optional[float] = Field(default=None, ge=0.0)


class MetricsReport(BaseModel):
    split: str
    mode: str = "registered"
    mse: Optional[float] = Field(default=None, ge=0.0)
    cosim: Optional[float] = Field(default=None, ge=0.0)
    chamfer: Optional[float] = Field(default=None, ge=0.0)
    static_mse: Optional[float] = Field(default=None, ge=0.0)
    per_sequence: List[SequenceMetrics] = Field(default_factory=list)


def _check_same_shape(pred: torch.Tensor, truth: torch.Tensor, what: str) -> None:
    if tuple(pred.shape) != tuple(truth.shape):
        raise ValidationError(f"{what}: prediction shape {tuple(pred.shape)} != ground truth {tuple(truth.shape)}")


# ==================== Registered losses ====================

def mse_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean over frames and vertices of the squared position error"""
    truth = torch.as_tensor(truth, dtype=pred.dtype, device=pred.device)
    _check_same_shape(pred, truth, "mse_loss")
    return ((pred - truth) ** 2).sum(dim=-1).mean()


def batched_vertex_normals(positions: torch.Tensor, faces) -> torch.Tensor:
    """Area-weighted vertex normals of (..., N, 3) positions; zero where undefined"""
    faces = torch.as_tensor(np.asarray(faces), dtype=torch.long, device=positions.device)
    v0 = positions[..., faces[:, 0], :]
    v1 = positions[..., faces[:, 1], :]
    v2 = positions[..., faces[:, 2], :]
    cross = torch.cross(v1 - v0, v2 - v0, dim=-1)
    accumulated = torch.zeros_like(positions)
    for corner in range(3):
        accumulated = accumulated.index_add(-2, faces[:, corner], cross)
    norms = accumulated.norm(dim=-1, keepdim=True)
    return torch.where(norms > ZERO_NORMAL, accumulated / norms.clamp_min(ZERO_NORMAL), torch.zeros_like(accumulated))


def normal_loss(pred: torch.Tensor, truth: torch.Tensor, faces) -> torch.Tensor:
    """
    Mean of 1 - n_pred . n_truth over vertex-frames with a defined normal in both.

    The denominator is the number of valid vertex-frames, which equals T * N
    whenever no normal is zero; excluded vertex-frames are logged.
    """
    truth = torch.as_tensor(truth, dtype=pred.dtype, device=pred.device)
    _check_same_shape(pred, truth, "normal_loss")
    n_pred = batched_vertex_normals(pred, faces)
    n_truth = batched_vertex_normals(truth, faces)
    valid = (n_pred.norm(dim=-1) > 0.5) & (n_truth.norm(dim=-1) > 0.5)
    excluded = int((~valid).sum())
    if excluded:
        logger.warning(f"normal_loss: excluded {excluded} vertex-frames with zero normals")
    if not torch.any(valid):
        raise DegenerateMeshError("normal_loss: no vertex has a defined normal")
    dissimilarity = 1.0 - (n_pred * n_truth).sum(dim=-1)
    return dissimilarity[valid].mean()


def aiap_loss(pred: torch.Tensor, source_positions, edges: Union[EdgeList, np.ndarray]) -> torch.Tensor:
    """Squared relative edge-length change against the source frame"""
    pairs = edges.edges if isinstance(edges, EdgeList) else np.asarray(edges)
    source = torch.as_tensor(np.asarray(source_positions), dtype=pred.dtype, device=pred.device)
    pairs = torch.as_tensor(pairs, dtype=torch.long, device=pred.device)
    rest = (source[pairs[:, 0]] - source[pairs[:, 1]]).norm(dim=-1)
    keep = rest >= MIN_EDGE_LENGTH
    if not torch.any(keep):
        raise DegenerateMeshError("aiap_loss: every source edge is shorter than the minimum length")
    pairs = pairs[keep]
    rest = rest[keep]
    if pred.ndim == 2:
        pred = pred.unsqueeze(0)
    current = (pred[:, pairs[:, 0]] - pred[:, pairs[:, 1]]).norm(dim=-1)
    return (((current - rest) / rest) ** 2).mean()


# ==================== Unregistered losses ====================

def _nearest_squared(a: torch.Tensor, b: torch.Tensor, method: str) -> torch.Tensor:
    """Squared distance from every row of a to its nearest row of b"""
    if method == "brute":
        return (torch.cdist(a, b) ** 2).min(dim=1).values
    if method == "kdtree":
        tree = cKDTree(b.detach().cpu().numpy())
        _, index = tree.query(a.detach().cpu().numpy(), k=1)
        index = torch.as_tensor(index, dtype=torch.long, device=a.device)
        return ((a - b[index]) ** 2).sum(dim=-1)
    raise ValidationError(f"unknown chamfer method {method!r}")


def chamfer_terms(pred_points, target_points, method: str = "kdtree") -> Tuple[torch.Tensor, torch.Tensor]:
    """(pred -> target, target -> pred) mean squared nearest-neighbour distances"""
    pred_points = torch.as_tensor(pred_points)
    target_points = torch.as_tensor(target_points, dtype=pred_points.dtype, device=pred_points.device)
    if pred_points.shape[0] == 0 or target_points.shape[0] == 0:
        raise ValidationError("chamfer distance needs two nonempty point sets")
    forward = _nearest_squared(pred_points, target_points, method).mean()
    backward = _nearest_squared(target_points, pred_points, method).mean()
    return forward, backward


def chamfer(pred_points, target_points, method: str = "kdtree") -> torch.Tensor:
    forward, backward = chamfer_terms(pred_points, target_points, method)
    return forward + backward


def chamfer_sequence_loss(pred_frames: Sequence[torch.Tensor], target_frames: Sequence, method: str = "kdtree") -> torch.Tensor:
    """Mean over frames of the per-frame chamfer distance"""
    if len(pred_frames) != len(target_frames):
        raise ValidationError(f"rollout has {len(pred_frames)} frames, target has {len(target_frames)}")
    if len(pred_frames) == 0:
        raise ValidationError("chamfer_sequence_loss needs at least one frame")
    terms = [chamfer(p, t.vertices if isinstance(t, TriMesh) else t, method) for p, t in zip(pred_frames, target_frames)]
    return torch.stack(terms).mean()


# ==================== Combined objective ====================

def aiap_active(weights: LossWeights, epoch_fraction: float) -> bool:
    return weights.lambda_i > 0 and epoch_fraction >= weights.lambda_i_start_fraction


def combine_losses(components: Dict[str, torch.Tensor], weights: LossWeights, epoch_fraction: float) -> torch.Tensor:
    total = components["mse"] + weights.lambda_n * components.get("normal", 0.0)
    if aiap_active(weights, epoch_fraction):
        total = total + weights.lambda_i * components.get("aiap", 0.0)
    return total


def total_loss(
    pred: torch.Tensor,
    truth: torch.Tensor,
    source: TriMesh,
    weights: LossWeights,
    epoch_fraction: float,
    edges: Optional[EdgeList] = None,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted registered objective plus its components for logging"""
    components = {"mse": mse_loss(pred, truth)}
    if weights.lambda_n > 0:
        components["normal"] = normal_loss(pred, truth, source.faces)
    if aiap_active(weights, epoch_fraction):
        components["aiap"] = aiap_loss(pred, source.vertices, edges if edges is not None else edge_list(source))
    total = combine_losses(components, weights, epoch_fraction)
    breakdown = {name: float(value.detach()) for name, value in components.items()}
    breakdown.setdefault("normal", 0.0)
    breakdown.setdefault("aiap", 0.0)
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ==================== Metrics ====================

def cosim(pred: torch.Tensor, truth: torch.Tensor, faces) -> float:
    """Cosine dissimilarity of vertex normals (same formula as normal_loss)"""
    with torch.no_grad():
        return float(normal_loss(pred, truth, faces))


def relative_deviation(metric_orig: float, metric_remesh: float) -> float:
    if not metric_orig > 0:
        raise ValidationError(f"relative deviation needs a positive reference metric, got {metric_orig}")
    return abs(metric_remesh - metric_orig) / metric_orig


def deviation_table(rows: List[Dict[str, float]], path: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Robustness rows (variant, mse_deviation, cosim_deviation, ...) as a DataFrame, optionally written as CSV"""
    table = pd.DataFrame(rows)
    if path is not None:
        table.to_csv(path, index=False)
        logger.info(f"Deviation table written to {path}")
    return table

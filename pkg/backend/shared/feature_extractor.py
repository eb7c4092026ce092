# backend/shared/feature_extractor.py
"""
Per-vertex feature field of a source mesh from stacked heat-diffusion blocks.

Each block diffuses its channels with learned times, adds rotation-invariant
features built from tangent gradients, and mixes everything with a shared
pointwise perceptron.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError, ValidationError
from .mesh_core import TriMesh, edge_list, vertex_normals
from .spectral_geometry import SpectralOps, TorchOperators, diffuse, tangent_gradient
from .utils import init_leaky_layers

logger = logging.getLogger(__name__)

INPUT_CHANNELS = 6


@dataclass
class FeatureField:
    """N_S x F features of one source mesh"""
    values: torch.Tensor
    source_hash: str = ""

    @property
    def n_vertices(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def _inverse_softplus(x: float) -> float:
    return float(x + np.log(-np.expm1(-x)))


class LearnedTimeDiffusion(nn.Module):
    """Per-channel diffusion with times kept nonnegative through softplus"""

    def __init__(self, channels: int, init_time: float = 1e-3):
        super().__init__()
        self.raw_time = nn.Parameter(torch.full((channels,), _inverse_softplus(init_time)))

    def times(self) -> torch.Tensor:
        return F.softplus(self.raw_time)

    def set_time(self, value: float) -> None:
        with torch.no_grad():
            self.raw_time.fill_(_inverse_softplus(value))

    def forward(self, x: torch.Tensor, ops: TorchOperators) -> torch.Tensor:
        return diffuse(ops, x, self.times().to(x.dtype))


class SpatialGradientFeatures(nn.Module):
    """tanh of inner products between gradients and learned complex-linear images of them"""

    def __init__(self, channels: int):
        super().__init__()
        self.a_re = nn.Linear(channels, channels, bias=False)
        self.a_im = nn.Linear(channels, channels, bias=False)

    def forward(self, grad_x: torch.Tensor, grad_y: torch.Tensor) -> torch.Tensor:
        b_x = self.a_re(grad_x) - self.a_im(grad_y)
        b_y = self.a_re(grad_y) + self.a_im(grad_x)
        return torch.tanh(grad_x * b_x + grad_y * b_y)


class DiffusionBlock(nn.Module):
    """
    Diffusion, gradient features and a residual pointwise perceptron.

    With use_diffusion=False the block sees only its input channels, which
    gives the plain per-vertex perceptron variant of the extractor.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        hidden: int = 128,
        init_time: float = 1e-3,
        index: int = 0,
        use_diffusion: bool = True,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.index = index
        self.use_diffusion = use_diffusion
        if use_diffusion:
            self.diffusion = LearnedTimeDiffusion(in_channels, init_time)
            self.gradient_features = SpatialGradientFeatures(in_channels)
        mlp_in = 3 * in_channels if use_diffusion else in_channels
        self.mlp = nn.Sequential(
            nn.Linear(mlp_in, hidden),
            nn.LeakyReLU(),
            nn.Linear(hidden, out_channels),
        )
        init_leaky_layers(self.mlp)

    def forward(self, x: torch.Tensor, ops: TorchOperators) -> torch.Tensor:
        if x.shape[-1] != self.in_channels:
            raise ValidationError(f"block {self.index} expects {self.in_channels} channels, got {x.shape[-1]}")
        if self.use_diffusion:
            diffused = self.diffusion(x, ops)
            gradients = tangent_gradient(ops, diffused)
            grad_features = self.gradient_features(gradients[..., 0], gradients[..., 1])
            out = self.mlp(torch.cat([x, diffused, grad_features], dim=-1))
        else:
            out = self.mlp(x)
        if self.in_channels == self.out_channels:
            out = out + x
        if not torch.all(torch.isfinite(out)):
            raise NumericalError("non-finite block output", stage=f"diffusion block {self.index}")
        return out


class FeatureExtractor(nn.Module):
    """Positions and normals (6 channels) -> F features per vertex"""

    def __init__(
        self,
        feature_dim: int = 64,
        width: int = 128,
        n_blocks: int = 4,
        init_time: float = 1e-3,
        use_diffusion: bool = True,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.width = width
        self.use_diffusion = use_diffusion
        self.first = nn.Linear(INPUT_CHANNELS, width)
        self.blocks = nn.ModuleList(
            [
                DiffusionBlock(width, width, hidden=width, init_time=init_time, index=i, use_diffusion=use_diffusion)
                for i in range(n_blocks)
            ]
        )
        self.last = nn.Linear(width, feature_dim)

    def calibrate_times(self, mesh: TriMesh) -> float:
        """Start every diffusion time at the mean squared edge length of mesh"""
        edges = edge_list(mesh).edges
        value = float(np.mean(np.sum((mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]) ** 2, axis=1)))
        if not self.use_diffusion:
            return value
        for block in self.blocks:
            block.diffusion.set_time(value)
        logger.info(f"Diffusion times initialised to {value:.3e}")
        return value

    def forward(self, signal: torch.Tensor, ops: TorchOperators) -> torch.Tensor:
        x = self.first(signal)
        for block in self.blocks:
            x = block(x, ops)
        return self.last(x)


def input_signal(mesh: TriMesh, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """Vertex positions concatenated with area-weighted normals"""
    normals = vertex_normals(mesh)
    signal = np.concatenate([mesh.vertices, normals], axis=1)
    return torch.as_tensor(signal, dtype=dtype, device=device)


def extract_features(mesh: TriMesh, ops: SpectralOps, params: FeatureExtractor, dtype: Optional[torch.dtype] = None) -> FeatureField:
    """Per-vertex feature field of mesh (differentiable in params)"""
    if ops.n_vertices != mesh.n_vertices:
        raise ValidationError(f"operators were built for {ops.n_vertices} vertices, mesh has {mesh.n_vertices}")
    if dtype is None:
        dtype = params.first.weight.dtype
    device = params.first.weight.device
    signal = input_signal(mesh, dtype=dtype, device=device)
    values = params(signal, ops.torch(dtype=dtype, device=device))
    if not torch.all(torch.isfinite(values)):
        raise NumericalError("non-finite feature field", stage="extract_features")
    return FeatureField(values=values, source_hash=mesh.content_hash())


def diffusion_block(field: torch.Tensor, ops: SpectralOps, block_params: DiffusionBlock) -> torch.Tensor:
    """Apply a single block to an N x C field"""
    field = torch.as_tensor(field)
    return block_params(field, ops.torch(dtype=field.dtype, device=field.device))

# backend/shared/spectral_geometry.py
"""
Discrete differential operators on triangle meshes: cotangent Laplacian,
lumped mass, truncated generalized eigenbasis, spectral heat diffusion and
per-vertex tangent-plane gradients.

Operators are built once per mesh with numpy/scipy and converted to torch
on demand for the learned layers.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg as sla
import torch

from .errors import DisconnectedMeshError, NumericalError, ValidationError
from .mesh_core import DEGENERATE_AREA, TriMesh, edge_list, vertex_normals

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-8
DENSE_EIGEN_LIMIT = 800
MASS_EPS = 1e-8


@dataclass
class TorchOperators:
    """Tensor view of SpectralOps used inside learned layers"""
    mass: torch.Tensor
    eigenvalues: torch.Tensor
    eigenvectors: torch.Tensor
    grad_x: torch.Tensor
    grad_y: torch.Tensor


@dataclass(frozen=True, eq=False)
class SpectralOps:
    """Precomputed operators of one mesh; immutable after build"""

    laplacian: scipy.sparse.csr_matrix
    mass: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    frames: np.ndarray
    grad_x: scipy.sparse.csr_matrix
    grad_y: scipy.sparse.csr_matrix
    low_valence: np.ndarray
    mesh_hash: str = ""
    _torch_views: Dict = field(default_factory=dict, compare=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, compare=False, repr=False)

    @property
    def n_vertices(self) -> int:
        return int(self.mass.shape[0])

    @property
    def k(self) -> int:
        return int(self.eigenvalues.shape[0])

    def torch(self, dtype: torch.dtype = torch.float32, device=None) -> TorchOperators:
        key = (dtype, str(device))
        with self._lock:
            view = self._torch_views.get(key)
            if view is None:
                view = TorchOperators(
                    mass=torch.as_tensor(self.mass, dtype=dtype, device=device),
                    eigenvalues=torch.as_tensor(self.eigenvalues, dtype=dtype, device=device),
                    eigenvectors=torch.as_tensor(self.eigenvectors, dtype=dtype, device=device),
                    grad_x=_sparse_to_torch(self.grad_x, dtype, device),
                    grad_y=_sparse_to_torch(self.grad_y, dtype, device),
                )
                self._torch_views[key] = view
        return view

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat array view used by the on-disk cache container"""
        lap = self.laplacian.tocoo()
        gx = self.grad_x.tocoo()
        gy = self.grad_y.tocoo()
        return {
            "lap_row": lap.row, "lap_col": lap.col, "lap_val": lap.data,
            "mass": self.mass,
            "eigenvalues": self.eigenvalues,
            "eigenvectors": self.eigenvectors,
            "frames": self.frames,
            "gx_row": gx.row, "gx_col": gx.col, "gx_val": gx.data,
            "gy_row": gy.row, "gy_col": gy.col, "gy_val": gy.data,
            "low_valence": self.low_valence,
        }

    @classmethod
    def from_arrays(cls, data: Dict[str, np.ndarray], mesh_hash: str = "") -> "SpectralOps":
        n = int(data["mass"].shape[0])

        def csr(prefix):
            return scipy.sparse.csr_matrix(
                (data[f"{prefix}_val"], (data[f"{prefix}_row"], data[f"{prefix}_col"])), shape=(n, n)
            )

        return cls(
            laplacian=csr("lap"),
            mass=np.asarray(data["mass"]),
            eigenvalues=np.asarray(data["eigenvalues"]),
            eigenvectors=np.asarray(data["eigenvectors"]),
            frames=np.asarray(data["frames"]),
            grad_x=csr("gx"),
            grad_y=csr("gy"),
            low_valence=np.asarray(data["low_valence"], dtype=bool),
            mesh_hash=mesh_hash,
        )


def _sparse_to_torch(matrix: scipy.sparse.spmatrix, dtype, device) -> torch.Tensor:
    coo = matrix.tocoo()
    indices = torch.as_tensor(np.vstack([coo.row, coo.col]).astype(np.int64))
    values = torch.as_tensor(coo.data, dtype=dtype)
    return torch.sparse_coo_tensor(indices, values, coo.shape, device=device).coalesce()


def cotangent_weights(mesh: TriMesh) -> Tuple[scipy.sparse.csr_matrix, np.ndarray]:
    """Symmetric cotangent weight matrix W and lumped vertex areas"""
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    doubled_area = np.linalg.norm(cross, axis=1)
    valid = doubled_area > 2.0 * DEGENERATE_AREA * max(mesh.bounding_box_diagonal() ** 2, 1e-300)
    if not np.all(valid):
        logger.warning(f"Skipping {int((~valid).sum())} degenerate faces in operator assembly")
    f = f[valid]
    doubled_area = doubled_area[valid]

    rows, cols, weights = [], [], []
    for corner in range(3):
        i = f[:, corner]
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        # angle at k is opposite edge (i, j)
        e1 = v[i] - v[k]
        e2 = v[j] - v[k]
        cot = np.einsum("ij,ij->i", e1, e2) / doubled_area
        rows.extend([i, j])
        cols.extend([j, i])
        weights.extend([0.5 * cot, 0.5 * cot])
    W = scipy.sparse.coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()

    mass = np.zeros(n)
    for corner in range(3):
        np.add.at(mass, f[:, corner], doubled_area / 6.0)
    return W, mass


def cotangent_laplacian(mesh: TriMesh) -> Tuple[scipy.sparse.csr_matrix, np.ndarray]:
    """Positive semi-definite L = D - W with zero row sums, plus lumped mass"""
    W, mass = cotangent_weights(mesh)
    degree = np.asarray(W.sum(axis=1)).ravel()
    L = (scipy.sparse.diags(degree) - W).tocsr()
    L.sum_duplicates()
    return L, mass


def tangent_frames(mesh: TriMesh) -> np.ndarray:
    """Per-vertex (x_axis, y_axis, normal) rows; x is the projected global x, else global y"""
    normals = vertex_normals(mesh)
    frames = np.zeros((mesh.n_vertices, 3, 3))
    reference = np.tile(np.array([1.0, 0.0, 0.0]), (mesh.n_vertices, 1))
    projected = reference - np.einsum("ij,ij->i", reference, normals)[:, None] * normals
    parallel = np.linalg.norm(projected, axis=1) < 0.1
    if np.any(parallel):
        fallback = np.array([0.0, 1.0, 0.0])
        projected[parallel] = fallback - (normals[parallel] @ fallback)[:, None] * normals[parallel]
    zero_normal = np.linalg.norm(normals, axis=1) == 0
    projected[zero_normal] = np.array([1.0, 0.0, 0.0])
    x_axis = projected / np.linalg.norm(projected, axis=1, keepdims=True)
    y_axis = np.cross(normals, x_axis)
    y_axis[zero_normal] = np.array([0.0, 1.0, 0.0])
    frames[:, 0] = x_axis
    frames[:, 1] = y_axis
    frames[:, 2] = normals
    return frames


def gradient_operators(mesh: TriMesh, frames: np.ndarray, adjacency: scipy.sparse.csr_matrix):
    """Least-squares one-ring gradient in each vertex tangent frame, as two sparse matrices"""
    n = mesh.n_vertices
    v = mesh.vertices
    rows, cols, gx, gy = [], [], [], []
    low_valence = np.zeros(n, dtype=bool)
    indptr, indices = adjacency.indptr, adjacency.indices

    for i in range(n):
        ring = indices[indptr[i]:indptr[i + 1]]
        ring = ring[ring != i]
        if len(ring) < 2:
            low_valence[i] = True
            continue
        offsets = v[ring] - v[i]
        E = np.stack([offsets @ frames[i, 0], offsets @ frames[i, 1]], axis=1)
        normal_matrix = E.T @ E
        scale = np.trace(normal_matrix)
        if scale <= 0 or np.linalg.det(normal_matrix) <= 1e-10 * scale * scale:
            low_valence[i] = True
            continue
        solve = np.linalg.solve(normal_matrix, E.T)
        rows.extend([i] * (len(ring) + 1))
        cols.extend(list(ring) + [i])
        gx.extend(list(solve[0]) + [-solve[0].sum()])
        gy.extend(list(solve[1]) + [-solve[1].sum()])

    if np.any(low_valence):
        logger.warning(f"{int(low_valence.sum())} vertices have a degenerate one-ring; their gradient is zero")
    grad_x = scipy.sparse.csr_matrix((gx, (rows, cols)), shape=(n, n))
    grad_y = scipy.sparse.csr_matrix((gy, (rows, cols)), shape=(n, n))
    return grad_x, grad_y, low_valence


def _eigenbasis(L: scipy.sparse.csr_matrix, mass: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    n = L.shape[0]
    if n <= DENSE_EIGEN_LIMIT:
        evals, evecs = scipy.linalg.eigh(L.toarray(), np.diag(mass), subset_by_index=[0, k - 1])
    else:
        M = scipy.sparse.diags(mass).tocsc()
        v0 = np.random.default_rng(0).standard_normal(n)
        shift = -EIGEN_TOLERANCE
        for attempt in range(4):
            try:
                evals, evecs = sla.eigsh(L.tocsc(), k=k, M=M, sigma=shift, which="LM", tol=EIGEN_TOLERANCE, v0=v0)
                break
            except Exception as e:
                if attempt == 3:
                    raise NumericalError(f"eigendecomposition failed: {e}", stage="build_operators")
                shift *= 10.0
                logger.warning(f"Eigendecomposition failed ({e}); retrying with shift {shift:.1e}")
    order = np.argsort(evals)
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivots = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivots, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evals, evecs * signs


def build_operators(mesh: TriMesh, k: int = 64) -> SpectralOps:
    """Cotangent Laplacian, lumped mass, k smallest eigenpairs of L phi = lambda M phi, tangent gradients"""
    n = mesh.n_vertices
    if k < 1 or k > n - 1:
        raise ValidationError(f"eigenpair count k={k} must be in [1, {n - 1}] for a {n}-vertex mesh")
    components = mesh.connected_component_count()
    if components != 1:
        raise DisconnectedMeshError(
            components, hint="keep the largest component or merge the pieces before building operators"
        )

    L, mass = cotangent_laplacian(mesh)
    if not np.all(np.isfinite(L.data)):
        raise NumericalError("non-finite Laplacian entries", stage="build_operators")
    mass = mass + MASS_EPS * np.mean(mass)

    evals, evecs = _eigenbasis(L, mass, k)
    frames = tangent_frames(mesh)
    edges = edge_list(mesh).edges
    adjacency = scipy.sparse.coo_matrix(
        (np.ones(2 * len(edges)), (np.concatenate([edges[:, 0], edges[:, 1]]), np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(n, n),
    ).tocsr()
    grad_x, grad_y, low_valence = gradient_operators(mesh, frames, adjacency)

    logger.debug(f"Built operators for {mesh.name!r}: N={n}, k={k}, lambda_1={evals[min(1, k - 1)]:.4g}")
    return SpectralOps(
        laplacian=L,
        mass=mass,
        eigenvalues=evals,
        eigenvectors=evecs,
        frames=frames,
        grad_x=grad_x,
        grad_y=grad_y,
        low_valence=low_valence,
        mesh_hash=mesh.content_hash(),
    )


def _as_torch_ops(ops, dtype, device) -> TorchOperators:
    if isinstance(ops, TorchOperators):
        return ops
    return ops.torch(dtype=dtype, device=device)


def diffuse(ops, field: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
    """Spectral heat flow of each channel for its own diffusion time"""
    field = torch.as_tensor(field)
    if not torch.is_floating_point(field):
        field = field.to(torch.float64)
    times = torch.as_tensor(times, dtype=field.dtype, device=field.device)
    if torch.any(times < 0):
        raise ValidationError("diffusion times must be nonnegative")
    squeeze = field.dim() == 1
    if squeeze:
        field = field[:, None]
        times = times.reshape(1)
    t_ops = _as_torch_ops(ops, field.dtype, field.device)
    basis = t_ops.eigenvectors
    coefficients = basis.transpose(0, 1) @ (t_ops.mass[:, None] * field)
    decay = torch.exp(-t_ops.eigenvalues[:, None] * times[None, :])
    result = basis @ (decay * coefficients)
    return result[:, 0] if squeeze else result


def tangent_gradient(ops, field: torch.Tensor) -> torch.Tensor:
    """N x 2 (scalar field) or N x C x 2 tangent gradients"""
    field = torch.as_tensor(field)
    if not torch.is_floating_point(field):
        field = field.to(torch.float64)
    t_ops = _as_torch_ops(ops, field.dtype, field.device)
    squeeze = field.dim() == 1
    values = field[:, None] if squeeze else field
    gx = torch.sparse.mm(t_ops.grad_x, values)
    gy = torch.sparse.mm(t_ops.grad_y, values)
    gradient = torch.stack([gx, gy], dim=-1)
    return gradient[:, 0, :] if squeeze else gradient


def mass_norm(ops: SpectralOps, field: np.ndarray) -> float:
    field = np.asarray(field)
    if field.ndim == 1:
        field = field[:, None]
    return float(np.sqrt(np.sum(ops.mass[:, None] * field * field)))

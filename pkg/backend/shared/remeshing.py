# backend/shared/remeshing.py
"""
Remeshing operators used to test discretization robustness:
factor-2 decimation, factor-2 refinement and variable density.
"""
import logging
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .mesh_core import TriMesh

logger = logging.getLogger(__name__)

MIN_DECIMATED_VERTICES = 10
# VD refines one half and coarsens the other by this vertex-density factor
VD_DENSITY_FACTOR = 3.0
MAX_ROUNDS = 60


class RemeshVariant(Enum):
    """Remeshing applied to a mesh before evaluation"""
    ORIGINAL = "original"
    DS2 = "ds2"
    US2 = "us2"
    VD = "vd"

    @classmethod
    def parse(cls, value: str) -> "RemeshVariant":
        try:
            return cls(value.strip().lower())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValidationError(f"unknown remesh variant {value!r}; expected one of {valid}")


VertexMask = Callable[[np.ndarray], np.ndarray]


def remesh(mesh: TriMesh, variant: RemeshVariant, seed: int = 0) -> TriMesh:
    """Return a re-triangulated copy of the mesh (ORIGINAL is a plain copy)"""
    rng = np.random.default_rng(seed)
    name = f"{mesh.name or 'mesh'}_{variant.value}"

    if variant == RemeshVariant.ORIGINAL:
        return TriMesh(mesh.vertices, mesh.faces, name=mesh.name)

    n = mesh.n_vertices
    vertices = np.array(mesh.vertices)
    faces = np.array(mesh.faces)

    if variant == RemeshVariant.DS2:
        target = int(round(n / 2))
        if target < MIN_DECIMATED_VERTICES:
            raise ValidationError(f"decimating {n} vertices to {target} is below the {MIN_DECIMATED_VERTICES}-vertex floor")
        vertices, faces = collapse_edges(vertices, faces, n - target, rng)
    elif variant == RemeshVariant.US2:
        vertices, faces = split_edges(vertices, faces, n, rng)
    elif variant == RemeshVariant.VD:
        vertices, faces = _variable_density(vertices, faces, rng)
    else:
        raise ValidationError(f"unsupported remesh variant {variant}")

    result = TriMesh(vertices, faces, name=name)
    logger.debug(f"remesh {variant.value}: {n} -> {result.n_vertices} vertices")
    return result


def splitting_plane(vertices: np.ndarray) -> Tuple[np.ndarray, int]:
    """Centroid and longest bounding-box axis used by the VD split"""
    extent = vertices.max(axis=0) - vertices.min(axis=0)
    return vertices.mean(axis=0), int(np.argmax(extent))


def _variable_density(vertices: np.ndarray, faces: np.ndarray, rng) -> Tuple[np.ndarray, np.ndarray]:
    center, axis = splitting_plane(vertices)

    def upper(v: np.ndarray) -> np.ndarray:
        return (v[:, axis] - center[axis]) > 0

    def lower(v: np.ndarray) -> np.ndarray:
        return (v[:, axis] - center[axis]) < 0

    n_up = int(upper(vertices).sum())
    n_down = int(lower(vertices).sum())
    vertices, faces = split_edges(vertices, faces, int(round((VD_DENSITY_FACTOR - 1.0) * n_up)), rng, allowed=upper)
    n_remove = int(round(n_down * (1.0 - 1.0 / VD_DENSITY_FACTOR)))
    if n_down - n_remove < MIN_DECIMATED_VERTICES:
        raise ValidationError("variable-density decimation would leave fewer than 10 vertices in the coarse half")
    return collapse_edges(vertices, faces, n_remove, rng, allowed=lower)


def _edge_adjacency(faces: np.ndarray):
    """Unique edges plus the (up to two) faces on each side; -1 marks a missing side"""
    n_faces = faces.shape[0]
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    owner = np.tile(np.arange(n_faces), 3)
    keys = np.sort(half, axis=1)
    edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    face_a = owner[order[starts]]
    face_b = np.full(len(edges), -1, dtype=np.int64)
    two = counts >= 2
    face_b[two] = owner[order[starts[two] + 1]]
    return edges, face_a, face_b, counts


def split_edges(
    vertices: np.ndarray,
    faces: np.ndarray,
    n_new: int,
    rng,
    allowed: Optional[VertexMask] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Insert n_new vertices by splitting the longest edges at their midpoints"""
    vertices = np.array(vertices, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    added = 0
    for _ in range(MAX_ROUNDS):
        if added >= n_new:
            break
        edges, face_a, face_b, counts = _edge_adjacency(faces)
        lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
        candidate = counts <= 2
        if allowed is not None:
            mask = allowed(vertices)
            candidate &= mask[edges[:, 0]] & mask[edges[:, 1]]
        order = np.lexsort((rng.random(len(edges)), -lengths))

        used = np.zeros(faces.shape[0], dtype=bool)
        selected = []
        for e in order:
            if not candidate[e]:
                continue
            a, b = face_a[e], face_b[e]
            if used[a] or (b >= 0 and used[b]):
                continue
            used[a] = True
            if b >= 0:
                used[b] = True
            selected.append(e)
            if added + len(selected) >= n_new:
                break
        if not selected:
            logger.warning(f"edge splitting stalled after adding {added} of {n_new} vertices")
            break

        new_faces = [faces[~used]]
        midpoints = np.empty((len(selected), 3))
        split_faces = []
        for i, e in enumerate(selected):
            u, v = edges[e]
            m = vertices.shape[0] + i
            midpoints[i] = 0.5 * (vertices[u] + vertices[v])
            for f in (face_a[e], face_b[e]):
                if f < 0:
                    continue
                split_faces.extend(_split_face(faces[f], u, v, m))
        vertices = np.concatenate([vertices, midpoints], axis=0)
        new_faces.append(np.asarray(split_faces, dtype=np.int64).reshape(-1, 3))
        faces = np.concatenate(new_faces, axis=0)
        added += len(selected)
    return vertices, faces


def _split_face(face: np.ndarray, u: int, v: int, m: int):
    """Two triangles replacing face after inserting m on edge (u, v), winding preserved"""
    for k in range(3):
        a, b, c = face[k], face[(k + 1) % 3], face[(k + 2) % 3]
        if {a, b} == {u, v}:
            return [(a, m, c), (m, b, c)]
    raise ValidationError(f"edge ({u}, {v}) is not part of face {tuple(face)}")


def _vertex_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    cross = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
    doubled_area = np.linalg.norm(cross, axis=1)
    normal = cross / np.maximum(doubled_area, 1e-300)[:, None]
    d = -np.einsum("ij,ij->i", normal, vertices[faces[:, 0]])
    plane = np.concatenate([normal, d[:, None]], axis=1)
    face_q = 0.5 * doubled_area[:, None, None] * plane[:, :, None] * plane[:, None, :]
    quadrics = np.zeros((vertices.shape[0], 4, 4))
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], face_q)
    return quadrics


def _vertex_faces(n_vertices: int, faces: np.ndarray):
    flat = faces.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_vertices)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    owners = order // 3
    return [owners[bounds[i]:bounds[i + 1]] for i in range(n_vertices)]


def _collapse_is_valid(u, v, point, vertices, faces, ring_faces, neighbors, boundary) -> bool:
    if boundary[u] or boundary[v]:
        return False
    common = neighbors[u] & neighbors[v]
    if len(common) != 2:
        return False
    if len(neighbors[u]) + len(neighbors[v]) - 4 < 3:
        return False
    if any(len(neighbors[w]) <= 3 for w in common):
        return False
    for x in (u, v):
        for f in ring_faces[x]:
            tri = faces[f]
            if u in tri and v in tri:
                continue
            before = vertices[tri]
            after = before.copy()
            after[tri == x] = point
            n_before = np.cross(before[1] - before[0], before[2] - before[0])
            n_after = np.cross(after[1] - after[0], after[2] - after[0])
            area_after = np.linalg.norm(n_after)
            if area_after <= 1e-12 * np.linalg.norm(n_before) or np.dot(n_before, n_after) <= 0.2 * np.linalg.norm(n_before) * area_after:
                return False
    return True


def collapse_edges(
    vertices: np.ndarray,
    faces: np.ndarray,
    n_remove: int,
    rng,
    allowed: Optional[VertexMask] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Quadric-ordered edge collapses with midpoint placement; removes n_remove vertices"""
    vertices = np.array(vertices, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    n_vertices = vertices.shape[0]
    removed = 0

    for _ in range(MAX_ROUNDS):
        if removed >= n_remove:
            break
        edges, face_a, face_b, counts = _edge_adjacency(faces)
        boundary = np.zeros(n_vertices, dtype=bool)
        open_edges = edges[counts != 2]
        boundary[open_edges.ravel()] = True

        quadrics = _vertex_quadrics(vertices, faces)
        midpoint = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
        homogeneous = np.concatenate([midpoint, np.ones((len(edges), 1))], axis=1)
        q = quadrics[edges[:, 0]] + quadrics[edges[:, 1]]
        error = np.einsum("ei,eij,ej->e", homogeneous, q, homogeneous)
        lengths_sq = np.sum((vertices[edges[:, 0]] - vertices[edges[:, 1]]) ** 2, axis=1)
        mean_area = float(np.mean(np.linalg.norm(
            np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]]),
            axis=1,
        ))) * 0.5
        cost = (np.maximum(error, 0.0) + 0.1 * mean_area * lengths_sq) * (1.0 + 0.05 * rng.random(len(edges)))
        candidate = counts == 2
        if allowed is not None:
            mask = allowed(vertices)
            candidate &= mask[edges[:, 0]] & mask[edges[:, 1]]

        ring_faces = _vertex_faces(n_vertices, faces)
        neighbors = [set() for _ in range(n_vertices)]
        for a, b in edges:
            neighbors[a].add(b)
            neighbors[b].add(a)

        locked = np.zeros(n_vertices, dtype=bool)
        collapses = []
        for e in np.argsort(cost, kind="stable"):
            if not candidate[e]:
                continue
            u, v = edges[e]
            if locked[u] or locked[v]:
                continue
            point = midpoint[e]
            if not _collapse_is_valid(u, v, point, vertices, faces, ring_faces, neighbors, boundary):
                continue
            collapses.append((u, v, point))
            locked[u] = locked[v] = True
            locked[list(neighbors[u])] = True
            locked[list(neighbors[v])] = True
            if removed + len(collapses) >= n_remove:
                break
        if not collapses:
            logger.warning(f"edge collapse stalled after removing {removed} of {n_remove} vertices")
            break

        remap = np.arange(n_vertices)
        for u, v, point in collapses:
            vertices[u] = point
            remap[v] = u
        faces = remap[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        faces = faces[keep]
        removed += len(collapses)

    used = np.unique(faces)
    compact = np.full(n_vertices, -1, dtype=np.int64)
    compact[used] = np.arange(len(used))
    return vertices[used], compact[faces]

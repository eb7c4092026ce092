# backend/shared/mesh_core.py
"""
Triangle mesh data model, OBJ/PLY file I/O and derived per-vertex quantities.

Meshes are immutable: arrays are copied on construction and flagged read-only,
so a TriMesh can be shared between threads. Equality and hashing are by
identity; caches key on content_hash().
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateMeshError, MeshFormatError, ValidationError
from .utils import FRAME_PATTERN, array_digest, frame_filename

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Faces with area below this (relative to the squared bounding-box diagonal)
# are treated as degenerate slivers.
DEGENERATE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices (N_S x 3) and counter-clockwise triangles (N_F x 3) of one frame"""

    vertices: np.ndarray
    faces: np.ndarray
    name: Optional[str] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64, copy=True)
        faces = np.array(self.faces, dtype=np.int64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValidationError(f"vertices must be N x 3, got shape {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValidationError(f"faces must be F x 3 triangles, got shape {faces.shape}")
        if vertices.shape[0] < 3:
            raise ValidationError(f"a mesh needs at least 3 vertices, got {vertices.shape[0]}")
        if faces.shape[0] < 1:
            raise ValidationError("a mesh needs at least one face")
        if not np.all(np.isfinite(vertices)):
            raise ValidationError("vertex coordinates must be finite")
        if faces.min() < 0 or faces.max() >= vertices.shape[0]:
            raise ValidationError(
                f"face index out of range [0, {vertices.shape[0]}): min {faces.min()}, max {faces.max()}"
            )
        repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if np.any(repeated):
            raise ValidationError(f"{int(repeated.sum())} faces repeat a vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def content_hash(self) -> str:
        return array_digest(self.vertices, self.faces)

    def with_vertices(self, vertices: np.ndarray, name: Optional[str] = None) -> "TriMesh":
        """Same connectivity, new positions"""
        return TriMesh(vertices, self.faces, name=name if name is not None else self.name)

    def bounding_box_diagonal(self) -> float:
        extent = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(extent))

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def connected_component_count(self) -> int:
        n = self.n_vertices
        rows = self.faces[:, [0, 1, 2]].ravel()
        cols = self.faces[:, [1, 2, 0]].ravel()
        adjacency = coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
        count, _ = connected_components(adjacency, directed=False)
        return int(count)

    def mean_edge_length(self) -> float:
        edges = edge_list(self).edges
        return float(np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1).mean())


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Unique undirected edges, each stored once as a sorted index pair"""

    edges: np.ndarray

    def __len__(self):
        return int(self.edges.shape[0])


@dataclass(frozen=True, eq=False)
class NormalizeTransform:
    """normalized = (x - translation) / scale"""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"normalization scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        return mesh.with_vertices(self.apply(mesh.vertices))

    def invert_mesh(self, mesh: TriMesh) -> TriMesh:
        return mesh.with_vertices(self.invert(mesh.vertices))

    def to_dict(self) -> dict:
        return {"translation": [float(x) for x in self.translation], "scale": self.scale}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizeTransform":
        return cls(np.asarray(data["translation"], dtype=np.float64), float(data["scale"]))

    @classmethod
    def identity(cls) -> "NormalizeTransform":
        return cls(np.zeros(3), 1.0)


@dataclass
class MotionSequence:
    """Ordered frames; vertex counts and connectivity may change between frames"""

    frames: List[TriMesh]
    name: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def is_registered(self) -> bool:
        if not self.frames:
            return False
        first = self.frames[0].faces
        return all(
            frame.n_vertices == self.frames[0].n_vertices
            and frame.faces.shape == first.shape
            and np.array_equal(frame.faces, first)
            for frame in self.frames[1:]
        )

    def vertex_array(self) -> np.ndarray:
        """T x N x 3 positions; only defined for registered sequences"""
        if not self.is_registered:
            raise ValidationError(f"sequence {self.name!r} is not registered (frame topology varies)")
        return np.stack([frame.vertices for frame in self.frames])

    def transformed(self, transform: NormalizeTransform) -> "MotionSequence":
        return MotionSequence([transform.apply_mesh(f) for f in self.frames], self.name, dict(self.metadata))


# ==================== File I/O ====================

def load_mesh(path: PathLike) -> TriMesh:
    """Load an OBJ or PLY (ASCII or binary little-endian) triangle mesh"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _read_obj(path)
    elif suffix == ".ply":
        vertices, faces = _read_ply(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r}", path=path)

    if len(vertices) == 0 or len(faces) == 0:
        raise ValidationError(f"{path}: empty mesh ({len(vertices)} vertices, {len(faces)} faces)")
    return TriMesh(vertices, faces, name=path.stem)


def save_mesh(mesh: TriMesh, path: PathLike) -> None:
    """Write OBJ (text) or PLY (binary little-endian, float64 positions)"""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".obj":
            _write_obj(mesh, path)
        elif suffix == ".ply":
            _write_ply(mesh, path)
        else:
            raise MeshFormatError(f"unsupported mesh format {suffix!r}", path=path)
    except OSError as e:
        logger.error(f"Failed to write mesh {path}: {e}")
        raise


def _read_obj(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError("vertex record needs 3 coordinates", path=path, line=line_no)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise MeshFormatError(f"invalid vertex coordinates {parts[1:4]}", path=path, line=line_no)
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"only triangular faces are supported, got {len(parts) - 1} corners", path=path, line=line_no
                    )
                face = []
                for token in parts[1:]:
                    try:
                        index = int(token.split("/", 1)[0])
                    except ValueError:
                        raise MeshFormatError(f"invalid face index {token!r}", path=path, line=line_no)
                    if index == 0:
                        raise MeshFormatError("OBJ face indices are 1-based; found 0", path=path, line=line_no)
                    # negative indices are relative to the vertices read so far
                    face.append(index - 1 if index > 0 else len(vertices) + index)
                if min(face) < 0 or max(face) >= len(vertices):
                    raise MeshFormatError(f"face references undefined vertex {face}", path=path, line=line_no)
                faces.append(face)
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(mesh: TriMesh, path: Path) -> None:
    lines = [f"# {mesh.name or 'mesh'}: {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    lines.extend(f"v {x:.10g} {y:.10g} {z:.10g}" for x, y, z in mesh.vertices)
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(path: Path, data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("missing PLY header", path=path, offset=0)
    newline = data.find(b"\n", end)
    body_start = newline + 1 if newline >= 0 else len(data)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []
    for line_no, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise MeshFormatError(f"invalid element declaration {line.strip()!r}", path=path, line=line_no)
            elements.append({"name": parts[1], "count": count, "properties": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", path=path, line=line_no)
            if len(parts) >= 5 and parts[1] == "list":
                prop = ("list", parts[4], parts[2], parts[3])
                types = (parts[2], parts[3])
            elif len(parts) == 3:
                prop = ("scalar", parts[2], parts[1], None)
                types = (parts[1],)
            else:
                raise MeshFormatError(f"invalid property declaration {line.strip()!r}", path=path, line=line_no)
            unknown = [t for t in types if t not in _PLY_TYPES]
            if unknown:
                raise MeshFormatError(f"unknown PLY property type {unknown[0]!r}", path=path, line=line_no)
            elements[-1]["properties"].append(prop)
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}", path=path)
    return fmt, elements, body_start


def _read_ply(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    data = path.read_bytes()
    fmt, elements, body_start = _parse_ply_header(path, data)
    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)

    if fmt == "ascii":
        tokens = data[body_start:].decode("ascii", errors="replace").split()
        cursor = 0
        for element in elements:
            rows = []
            for row_index in range(element["count"]):
                row = []
                for kind, name, dtype, index_dtype in element["properties"]:
                    try:
                        if kind == "list":
                            n = int(tokens[cursor])
                            row.append([int(t) for t in tokens[cursor + 1:cursor + 1 + n]])
                            cursor += 1 + n
                        else:
                            row.append(float(tokens[cursor]))
                            cursor += 1
                    except (IndexError, ValueError):
                        raise MeshFormatError(
                            f"truncated or invalid {element['name']} record {row_index}", path=path
                        )
                rows.append(row)
            vertices, faces = _collect_ply_element(path, element, rows, vertices, faces)
        return vertices, faces

    offset = body_start
    for element in elements:
        props = element["properties"]
        if all(kind == "scalar" for kind, *_ in props):
            dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for _, name, t, _ in props])
            size = dtype.itemsize * element["count"]
            if offset + size > len(data):
                raise MeshFormatError(f"truncated {element['name']} block", path=path, offset=offset)
            table = np.frombuffer(data, dtype=dtype, count=element["count"], offset=offset)
            offset += size
            if element["name"] == "vertex":
                vertices = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(np.float64)
        elif element["name"] == "face" and len(props) == 1:
            _, name, count_type, index_type = props[0]
            dtype = np.dtype([("n", "<" + _PLY_TYPES[count_type]), ("idx", "<" + _PLY_TYPES[index_type], (3,))])
            size = dtype.itemsize * element["count"]
            if offset + size > len(data):
                raise MeshFormatError("truncated face block", path=path, offset=offset)
            table = np.frombuffer(data, dtype=dtype, count=element["count"], offset=offset)
            if np.any(table["n"] != 3):
                raise MeshFormatError("only triangular faces are supported", path=path, offset=offset)
            faces = table["idx"].astype(np.int64)
            offset += size
        else:
            raise MeshFormatError(f"unsupported binary layout for element {element['name']!r}", path=path, offset=offset)

    _check_ply_indices(path, vertices, faces)
    return vertices, faces


def _collect_ply_element(path, element, rows, vertices, faces):
    names = [name for _, name, _, _ in element["properties"]]
    if element["name"] == "vertex":
        try:
            columns = [names.index(axis) for axis in ("x", "y", "z")]
        except ValueError:
            raise MeshFormatError("vertex element lacks x/y/z", path=path)
        vertices = np.asarray([[row[c] for c in columns] for row in rows], dtype=np.float64).reshape(-1, 3)
    elif element["name"] == "face":
        column = next(i for i, (kind, *_) in enumerate(element["properties"]) if kind == "list")
        polygons = [row[column] for row in rows]
        if any(len(p) != 3 for p in polygons):
            raise MeshFormatError("only triangular faces are supported", path=path)
        faces = np.asarray(polygons, dtype=np.int64).reshape(-1, 3)
        _check_ply_indices(path, vertices, faces)
    return vertices, faces


def _check_ply_indices(path, vertices, faces):
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshFormatError("face index out of range", path=path)


def _write_ply(mesh: TriMesh, path: Path) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"comment {mesh.name or 'mesh'}\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    face_dtype = np.dtype([("n", "<u1"), ("idx", "<i4", (3,))])
    face_table = np.empty(mesh.n_faces, dtype=face_dtype)
    face_table["n"] = 3
    face_table["idx"] = mesh.faces
    with open(path, "wb") as handle:
        handle.write(header.encode("ascii"))
        handle.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        handle.write(face_table.tobytes())


def load_sequence(directory: PathLike, name: Optional[str] = None) -> MotionSequence:
    """Load numbered frame_XXXX.obj|ply files in frame order"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"motion directory not found: {directory}")
    numbered = []
    for path in directory.iterdir():
        match = FRAME_PATTERN.match(path.name)
        if match:
            numbered.append((int(match.group(1)), path))
    if not numbered:
        raise ValidationError(f"no frame_XXXX.obj/.ply files in {directory}")
    numbered.sort()
    frames = [load_mesh(path) for _, path in numbered]
    logger.info(f"Loaded {len(frames)} frames from {directory}")
    return MotionSequence(frames, name=name or directory.name)


def save_sequence(sequence: MotionSequence, directory: PathLike, extension: str = "obj") -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, frame in enumerate(sequence.frames):
        path = directory / frame_filename(index, extension)
        save_mesh(frame, path)
        paths.append(path)
    return paths


# ==================== Derived quantities ====================

def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (length = twice the face area)"""
    return np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])


def vertex_normals(mesh: TriMesh, return_flags: bool = False):
    """Area-weighted unit vertex normals; isolated or fully degenerate vertices get zero"""
    cross = face_normals(mesh.vertices, mesh.faces)
    doubled_area = np.linalg.norm(cross, axis=1)
    threshold = 2.0 * DEGENERATE_AREA * max(mesh.bounding_box_diagonal() ** 2, 1e-300)
    valid = doubled_area > threshold
    skipped = int((~valid).sum())
    if skipped:
        logger.debug(f"Skipped {skipped} degenerate faces in normal accumulation")

    accumulated = np.zeros((mesh.n_vertices, 3))
    for corner in range(3):
        np.add.at(accumulated, mesh.faces[valid, corner], cross[valid])

    norms = np.linalg.norm(accumulated, axis=1)
    zero = norms <= 1e-300
    normals = np.zeros_like(accumulated)
    normals[~zero] = accumulated[~zero] / norms[~zero, None]
    if np.any(zero):
        logger.warning(f"{int(zero.sum())} vertices have no non-degenerate incident face; normal set to zero")
    if return_flags:
        return normals, zero
    return normals


def edge_list(mesh: TriMesh) -> EdgeList:
    """Sorted unique undirected edges of all faces"""
    f = mesh.faces
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    return EdgeList(np.unique(pairs, axis=0))


def normalize(mesh: TriMesh) -> Tuple[TriMesh, NormalizeTransform]:
    """Center on the vertex centroid and scale the bounding-box diagonal to 1"""
    diagonal = mesh.bounding_box_diagonal()
    if not diagonal > 1e-12:
        raise DegenerateMeshError(f"mesh {mesh.name!r} has zero extent (bounding-box diagonal {diagonal:.3g})")
    transform = NormalizeTransform(mesh.vertices.mean(axis=0), diagonal)
    return transform.apply_mesh(mesh), transform


def nearest_correspondence(source: TriMesh, target: TriMesh) -> np.ndarray:
    """Index of the nearest target vertex for every source vertex"""
    tree = cKDTree(target.vertices)
    _, indices = tree.query(source.vertices, k=1)
    return np.asarray(indices, dtype=np.int64)

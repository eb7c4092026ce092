# backend/shared/synthetic_data.py
"""
Procedural articulated bodies with registered ground-truth motions.

A body is a subdivided box torso with extruded tube limbs and a head. The
generator poses it with an internal skeleton (root plus two segments per
limb) through dual-quaternion blending. Skeleton data never leaves this
module; datasets on disk contain meshes only.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial.transform import Rotation

from .errors import ValidationError
from .mesh_core import MotionSequence, TriMesh, load_mesh, save_mesh, save_sequence
from .remeshing import RemeshVariant, remesh
from .utils import array_digest, sanitize_name

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LEVEL_VERTICES = {0: 1000, 1: 4000, 2: 8000}
MIN_FRAMES = 10
MAX_FRAMES = 400
UNREGISTER_VARIANTS = (RemeshVariant.DS2, RemeshVariant.US2, RemeshVariant.VD)

# outward normal (axis, sign) -> in-plane (u, v) axes with u x v = normal
_FACE_AXES = {
    (0, 1): (1, 2),
    (0, -1): (2, 1),
    (1, 1): (2, 0),
    (1, -1): (0, 2),
    (2, 1): (0, 1),
    (2, -1): (1, 0),
}


# ==================== Specs ====================

@dataclass
class IdentitySpec:
    """Body proportions in metres; body frame is +x forward, +y left, +z up"""
    upper_arm: float = 0.28
    lower_arm: float = 0.26
    upper_leg: float = 0.42
    lower_leg: float = 0.40
    arm_radius_upper: float = 0.045
    arm_radius_lower: float = 0.035
    leg_radius_upper: float = 0.07
    leg_radius_lower: float = 0.05
    torso_depth: float = 0.22
    torso_width: float = 0.36
    torso_height: float = 0.55
    head_radius: float = 0.085
    head_length: float = 0.22
    level: int = 0
    seed: int = 0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if name in ("level", "seed"):
                continue
            if not value > 0:
                raise ValidationError(f"identity {name} must be positive, got {value}")
        if self.level not in LEVEL_VERTICES:
            raise ValidationError(f"resolution level must be one of {sorted(LEVEL_VERTICES)}, got {self.level}")
        if self.leg_radius_upper >= self.torso_width / 4:
            raise ValidationError("self-intersecting spec: legs overlap (leg radius >= torso width / 4)")
        if self.leg_radius_upper >= self.torso_depth / 2:
            raise ValidationError("self-intersecting spec: legs are deeper than the torso")
        if self.arm_radius_upper >= min(self.torso_depth, self.torso_height / 2) / 2:
            raise ValidationError("self-intersecting spec: arms are too thick for the torso")
        if self.head_radius >= min(self.torso_depth, self.torso_width) / 2:
            raise ValidationError("self-intersecting spec: head is wider than the torso")

    @property
    def leg_length(self) -> float:
        return self.upper_leg + self.lower_leg


class MotionKind(Enum):
    ARM_RAISE = "arm_raise"
    KNEE_RAISE = "knee_raise"
    WALK_CYCLE = "walk_cycle"
    RUN_CYCLE = "run_cycle"

    @property
    def long_range(self) -> bool:
        return self in (MotionKind.WALK_CYCLE, MotionKind.RUN_CYCLE)


# joint limit (radians) on the amplitude of each motion kind
JOINT_LIMITS = {
    MotionKind.ARM_RAISE: 2.5,
    MotionKind.KNEE_RAISE: 1.6,
    MotionKind.WALK_CYCLE: 0.8,
    MotionKind.RUN_CYCLE: 0.9,
}
DEFAULT_AMPLITUDE = {
    MotionKind.ARM_RAISE: 1.2,
    MotionKind.KNEE_RAISE: 1.0,
    MotionKind.WALK_CYCLE: 0.45,
    MotionKind.RUN_CYCLE: 0.6,
}
DEFAULT_CYCLES = {
    MotionKind.ARM_RAISE: 1.0,
    MotionKind.KNEE_RAISE: 2.0,
    MotionKind.WALK_CYCLE: 2.0,
    MotionKind.RUN_CYCLE: 3.0,
}


@dataclass
class MotionSpec:
    kind: MotionKind
    frames: int = 30
    amplitude: Optional[float] = None
    cycles: Optional[float] = None
    phase: float = 0.0
    heading: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = MotionKind(self.kind)
        if self.amplitude is None:
            self.amplitude = DEFAULT_AMPLITUDE[self.kind]
        if self.cycles is None:
            self.cycles = DEFAULT_CYCLES[self.kind]

    def validate(self) -> None:
        if not MIN_FRAMES <= self.frames <= MAX_FRAMES:
            raise ValidationError(f"motion length must be in [{MIN_FRAMES}, {MAX_FRAMES}] frames, got {self.frames}")
        limit = JOINT_LIMITS[self.kind]
        if self.amplitude < 0 or self.amplitude > limit:
            raise ValidationError(
                f"joint limit exceeded: {self.kind.value} amplitude {self.amplitude:.3f} outside [0, {limit}] rad"
            )
        if not self.cycles > 0:
            raise ValidationError(f"cycles must be positive, got {self.cycles}")

    def stride(self, identity: IdentitySpec) -> float:
        """Root advance per gait cycle"""
        if not self.kind.long_range:
            return 0.0
        return 2.0 * identity.leg_length * float(np.sin(self.amplitude))


# ==================== Body construction ====================

@dataclass
class _Patch:
    name: str
    axis: int
    sign: int
    center: Tuple[int, int]
    m: int
    rings: int
    length: float
    upper_length: Optional[float]
    radius_upper: float
    radius_lower: float


@dataclass
class _Layout:
    counts: Tuple[int, int, int]
    size: Tuple[float, float, float]
    patches: List[_Patch]

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.counts
        box = (nx + 1) * (ny + 1) * (nz + 1) - (nx - 1) * (ny - 1) * (nz - 1)
        return box + sum(p.rings * 4 * p.m for p in self.patches)


@dataclass
class BodyRig:
    """Internal skeleton: segment 0 is the root, limbs own an upper and a lower segment"""
    segments: List[str]
    joints: Dict[str, Tuple[np.ndarray, np.ndarray]]
    weights: np.ndarray


@dataclass
class SyntheticBody:
    mesh: TriMesh
    spec: IdentitySpec
    rig: BodyRig = field(repr=False)


def _even(value: float, minimum: int = 2) -> int:
    return max(minimum, 2 * int(round(value / 2.0)))


def _fit_patch(m: int, fits) -> int:
    while m >= 2:
        if fits(m):
            return m
        m -= 2
    raise ValidationError("resolution too coarse to place every limb on the torso")


def _layout(spec: IdentitySpec, h: float) -> _Layout:
    size = (spec.torso_depth, spec.torso_width, spec.torso_height)
    nx, ny, nz = (_even(s / h) for s in size)

    def patch_m(radius):
        return max(2, 2 * int(np.floor(radius / h)))

    def rings(length):
        return max(2, int(round(length / h)))

    patches = []
    m_head = _fit_patch(patch_m(spec.head_radius), lambda m: m // 2 <= min(nx, ny) // 2 - 1)
    patches.append(
        _Patch("head", 2, 1, (nx // 2, ny // 2), m_head, rings(spec.head_length), spec.head_length,
               None, 0.8 * spec.head_radius, spec.head_radius)
    )

    m_arm = _fit_patch(patch_m(spec.arm_radius_upper), lambda m: m // 2 <= nx // 2 - 1 and nz - 1 - m >= 1)
    arm_length = spec.upper_arm + spec.lower_arm
    for name, sign in (("left_arm", 1), ("right_arm", -1)):
        u_axis, _ = _FACE_AXES[(1, sign)]
        z = nz - 1 - m_arm // 2
        center = (z, nx // 2) if u_axis == 2 else (nx // 2, z)
        patches.append(
            _Patch(name, 1, sign, center, m_arm, rings(arm_length), arm_length, spec.upper_arm,
                   spec.arm_radius_upper, spec.arm_radius_lower)
        )

    def leg_offset(m):
        return max(int(round(ny / 4)), m // 2 + 1)

    m_leg = _fit_patch(
        patch_m(spec.leg_radius_upper),
        lambda m: m // 2 <= nx // 2 - 1 and ny // 2 + leg_offset(m) + m // 2 <= ny - 1,
    )
    c = leg_offset(m_leg)
    leg_length = spec.upper_leg + spec.lower_leg
    for name, offset in (("left_leg", c), ("right_leg", -c)):
        # -z face: u = y, v = x
        patches.append(
            _Patch(name, 2, -1, (ny // 2 + offset, nx // 2), m_leg, rings(leg_length), leg_length, spec.upper_leg,
                   spec.leg_radius_upper, spec.leg_radius_lower)
        )
    return _Layout((nx, ny, nz), size, patches)


def _calibrate(spec: IdentitySpec, target: int) -> _Layout:
    """Lattice spacing whose vertex count is closest to target"""
    scale = max(spec.torso_height, spec.leg_length)
    best = None
    for h in np.geomspace(scale / 400.0, scale / 4.0, 240):
        try:
            layout = _layout(spec, float(h))
        except ValidationError:
            continue
        error = abs(layout.n_vertices - target)
        if best is None or error < best[0]:
            best = (error, layout)
    if best is None:
        raise ValidationError(f"no body lattice fits the identity at {target} vertices")
    return best[1]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def build_body(spec: IdentitySpec, target_vertices: Optional[int] = None) -> SyntheticBody:
    """Watertight single-component humanoid in a T-pose"""
    spec.validate()
    target = target_vertices if target_vertices is not None else LEVEL_VERTICES[spec.level]
    layout = _calibrate(spec, target)
    nx, ny, nz = layout.counts
    X, Y, Z = layout.size
    spacing = np.array([X / nx, Y / ny, Z / nz])
    origin = -0.5 * np.array([X, Y, Z])

    # box surface lattice
    index = np.full((nx + 1, ny + 1, nz + 1), -1, dtype=np.int64)
    grid = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"), axis=-1)
    on_surface = (
        (grid[..., 0] == 0) | (grid[..., 0] == nx)
        | (grid[..., 1] == 0) | (grid[..., 1] == ny)
        | (grid[..., 2] == 0) | (grid[..., 2] == nz)
    )
    lattice = grid[on_surface]
    index[on_surface] = np.arange(lattice.shape[0])
    positions = [origin + lattice * spacing]
    n_box = lattice.shape[0]
    counts = (nx, ny, nz)

    def lat(axis, sign, a, b):
        u, v = _FACE_AXES[(axis, sign)]
        ijk = [0, 0, 0]
        ijk[axis] = 0 if sign < 0 else counts[axis]
        ijk[u] = a
        ijk[v] = b
        return int(index[tuple(ijk)])

    patch_quads = {}
    for p in layout.patches:
        h = p.m // 2
        ca, cb = p.center
        patch_quads.setdefault((p.axis, p.sign), set()).update(
            (a, b) for a in range(ca - h, ca + h) for b in range(cb - h, cb + h)
        )

    quads = []
    for (axis, sign), (u, v) in _FACE_AXES.items():
        skip = patch_quads.get((axis, sign), set())
        for a in range(counts[u]):
            for b in range(counts[v]):
                if (a, b) in skip:
                    continue
                quads.append((lat(axis, sign, a, b), lat(axis, sign, a + 1, b),
                              lat(axis, sign, a + 1, b + 1), lat(axis, sign, a, b + 1)))

    segments = ["root"]
    joints: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    # (vertex ids, axial distance, patch) for limb-owned vertices
    limb_vertices = []
    next_id = n_box
    cap_positions = {}

    for p in layout.patches:
        u, v = _FACE_AXES[(p.axis, p.sign)]
        normal = np.zeros(3)
        normal[p.axis] = p.sign
        u_vec = np.eye(3)[u]
        v_vec = np.eye(3)[v]
        h = p.m // 2
        ca, cb = p.center
        center = positions[0][lat(p.axis, p.sign, ca, cb)]

        # counter-clockwise loop around the outward normal
        loop = (
            [(a, cb - h) for a in range(ca - h, ca + h)]
            + [(ca + h, b) for b in range(cb - h, cb + h)]
            + [(a, cb + h) for a in range(ca + h, ca - h, -1)]
            + [(ca - h, b) for b in range(cb + h, cb - h, -1)]
        )
        loop_ids = [lat(p.axis, p.sign, a, b) for a, b in loop]
        q = np.array([((a - ca) / h, (b - cb) / h) for a, b in loop])
        square = positions[0][loop_ids] - center
        square = square - np.outer(square @ normal, normal)
        circle_dir = (q[:, :1] * u_vec + q[:, 1:] * v_vec) / np.linalg.norm(q, axis=1, keepdims=True)

        ring_ids = [loop_ids]
        ring_positions = []
        axial = []
        for k in range(1, p.rings + 1):
            d = p.length * k / p.rings
            radius = p.radius_upper + (p.radius_lower - p.radius_upper) * d / p.length
            w = min(1.0, k / 2.0)
            ring_positions.append(center + d * normal + (1 - w) * square + w * radius * circle_dir)
            ids = list(range(next_id, next_id + len(loop)))
            next_id += len(loop)
            ring_ids.append(ids)
            axial.append(np.full(len(loop), d))
        positions.append(np.concatenate(ring_positions))

        n_loop = len(loop)
        for k in range(p.rings):
            lower, upper = ring_ids[k], ring_ids[k + 1]
            for ell in range(n_loop):
                nxt = (ell + 1) % n_loop
                quads.append((lower[ell], lower[nxt], upper[nxt], upper[ell]))

        # cap: the patch interior moves to the tip and hangs off the last ring
        tip = dict(zip(loop_ids, ring_ids[-1]))
        dome = 0.7 * p.radius_lower
        cap_ids = []
        cap_axial = []
        for a in range(ca - h + 1, ca + h):
            for b in range(cb - h + 1, cb + h):
                vid = lat(p.axis, p.sign, a, b)
                qa, qb = (a - ca) / h, (b - cb) / h
                rho = max(abs(qa), abs(qb))
                norm = np.hypot(qa, qb)
                direction = (qa * u_vec + qb * v_vec) / norm if norm > 0 else np.zeros(3)
                lift = dome * np.sqrt(max(0.0, 1.0 - rho * rho))
                cap_positions[vid] = center + (p.length + lift) * normal + p.radius_lower * rho * direction
                cap_ids.append(vid)
                cap_axial.append(p.length + lift)
        for a in range(ca - h, ca + h):
            for b in range(cb - h, cb + h):
                corners = [lat(p.axis, p.sign, a, b), lat(p.axis, p.sign, a + 1, b),
                           lat(p.axis, p.sign, a + 1, b + 1), lat(p.axis, p.sign, a, b + 1)]
                quads.append(tuple(tip.get(c, c) for c in corners))

        ids = np.concatenate([np.concatenate(ring_ids[1:]), np.array(cap_ids, dtype=np.int64)])
        dist = np.concatenate(axial + [np.array(cap_axial)])
        limb_vertices.append((ids, dist, p))
        if p.upper_length is not None:
            segments.extend([f"{p.name}_upper", f"{p.name}_lower"])
            joints[p.name] = (center.copy(), center + p.upper_length * normal)

    vertices = np.concatenate(positions)
    for vid, point in cap_positions.items():
        vertices[vid] = point

    quads = np.array(quads, dtype=np.int64)
    faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])

    weights = np.zeros((vertices.shape[0], len(segments)))
    weights[:, 0] = 1.0
    for ids, dist, p in limb_vertices:
        if p.upper_length is None:
            continue
        step = p.length / p.rings
        upper_idx = segments.index(f"{p.name}_upper")
        lower_len = p.length - p.upper_length
        blend = min(2.0 * step, 0.5 * p.upper_length)
        delta = min(1.5 * step, p.upper_length / 3.0, lower_len / 3.0)
        s0 = _smoothstep(dist / blend)
        s1 = _smoothstep((dist - p.upper_length + delta) / (2.0 * delta))
        weights[ids, 0] = 1.0 - s0
        weights[ids, upper_idx] = s0 * (1.0 - s1)
        weights[ids, upper_idx + 1] = s0 * s1

    mesh = TriMesh(vertices, faces, name=f"body_{spec.seed}")
    components = mesh.connected_component_count()
    if components != 1:
        raise ValidationError(f"generated body has {components} components")
    logger.debug(f"Built body {mesh.name}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return SyntheticBody(mesh=mesh, spec=spec, rig=BodyRig(segments, joints, weights))


def random_identity(seed: int, level: int = 0, spread: float = 0.15) -> IdentitySpec:
    """Default proportions scaled by independent factors in [1 - spread, 1 + spread]"""
    rng = np.random.default_rng(seed)
    base = asdict(IdentitySpec())
    values = {}
    for name, value in base.items():
        if name in ("level", "seed"):
            continue
        values[name] = float(value * rng.uniform(1.0 - spread, 1.0 + spread))
    spec = IdentitySpec(**values, level=level, seed=seed)
    spec.leg_radius_upper = min(spec.leg_radius_upper, 0.9 * spec.torso_width / 4, 0.9 * spec.torso_depth / 2)
    spec.leg_radius_lower = min(spec.leg_radius_lower, spec.leg_radius_upper)
    spec.arm_radius_upper = min(spec.arm_radius_upper, 0.9 * min(spec.torso_depth, spec.torso_height / 2) / 2)
    spec.arm_radius_lower = min(spec.arm_radius_lower, spec.arm_radius_upper)
    spec.head_radius = min(spec.head_radius, 0.9 * min(spec.torso_depth, spec.torso_width) / 2)
    spec.validate()
    return spec


# ==================== Skinning ====================

def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-last quaternions"""
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def _to_dual(rotation: Rotation, translation: np.ndarray) -> np.ndarray:
    real = rotation.as_quat()
    dual = 0.5 * _qmul(np.append(translation, 0.0), real)
    return np.concatenate([real, dual])


def _blend(points: np.ndarray, weights: np.ndarray, transforms: List[Tuple[Rotation, np.ndarray]]) -> np.ndarray:
    """Dual-quaternion linear blending of rigid segment transforms"""
    duals = np.stack([_to_dual(r, t) for r, t in transforms])
    reference = duals[0, :4]
    signs = np.where(duals[:, :4] @ reference < 0, -1.0, 1.0)
    blended = weights @ (duals * signs[:, None])
    real, dual = blended[:, :4], blended[:, 4:]
    norm = np.linalg.norm(real, axis=1, keepdims=True)
    real, dual = real / norm, dual / norm
    conj = real * np.array([-1.0, -1.0, -1.0, 1.0])
    translation = 2.0 * _qmul(dual, conj)[:, :3]
    return Rotation.from_quat(real).apply(points) + translation


@dataclass
class _Pose:
    root_rotation: Rotation
    root_translation: np.ndarray
    limbs: Dict[str, Tuple[Rotation, Rotation]]


def _compose(outer: Tuple[Rotation, np.ndarray], inner: Tuple[Rotation, np.ndarray]) -> Tuple[Rotation, np.ndarray]:
    r_o, t_o = outer
    r_i, t_i = inner
    return r_o * r_i, r_o.apply(t_i) + t_o


def _segment_transforms(rig: BodyRig, pose: _Pose) -> List[Tuple[Rotation, np.ndarray]]:
    root = (pose.root_rotation, np.asarray(pose.root_translation, dtype=np.float64))
    transforms = [root]
    for name in rig.segments[1::2]:
        limb = name[: -len("_upper")]
        j0, j1 = rig.joints[limb]
        r_u, r_l = pose.limbs.get(limb, (Rotation.identity(), Rotation.identity()))
        upper = (r_u, j0 - r_u.apply(j0))
        lower = (r_u * r_l, r_u.apply(j1 - r_l.apply(j1) - j0) + j0)
        transforms.append(_compose(root, upper))
        transforms.append(_compose(root, lower))
    return transforms


def pose_body(body: SyntheticBody, pose: _Pose) -> np.ndarray:
    return _blend(body.mesh.vertices, body.rig.weights, _segment_transforms(body.rig, pose))


def _rot(axis: str, angle: float) -> Rotation:
    return Rotation.from_euler(axis, angle)


def _motion_pose(body: SyntheticBody, spec: MotionSpec, t: int) -> _Pose:
    s = t / (spec.frames - 1)
    phi = 2.0 * np.pi * spec.cycles * s + spec.phase
    a = spec.amplitude
    limbs: Dict[str, Tuple[Rotation, Rotation]] = {}
    root_rotation = Rotation.identity()
    translation = np.zeros(3)

    def arm(side: int, raise_angle: float, swing: float, elbow: float):
        return _rot("x", side * raise_angle) * _rot("z", -side * swing), _rot("z", -side * elbow)

    if spec.kind == MotionKind.ARM_RAISE:
        g = 0.5 * (1.0 - np.cos(phi))
        limbs["left_arm"] = arm(1, a * g, 0.0, 0.3 * a * g)
        limbs["right_arm"] = arm(-1, a * g, 0.0, 0.3 * a * g)
    elif spec.kind == MotionKind.KNEE_RAISE:
        g_left = 0.5 * (1.0 - np.cos(phi))
        g_right = 0.5 * (1.0 - np.cos(phi + np.pi))
        limbs["left_leg"] = (_rot("y", -a * g_left), _rot("y", 1.2 * a * g_left))
        limbs["right_leg"] = (_rot("y", -a * g_right), _rot("y", 1.2 * a * g_right))
    else:
        run = spec.kind == MotionKind.RUN_CYCLE
        knee = (1.6 if run else 1.0) * a
        elbow = (0.8 if run else 0.2) * a
        hip = a * np.sin(phi)
        limbs["left_leg"] = (_rot("y", -hip), _rot("y", knee * 0.5 * (1.0 - np.cos(phi))))
        limbs["right_leg"] = (_rot("y", hip), _rot("y", knee * 0.5 * (1.0 + np.cos(phi))))
        # arms counter-swing against the leg on the same side
        limbs["left_arm"] = arm(1, 0.0, -0.6 * hip, elbow)
        limbs["right_arm"] = arm(-1, 0.0, 0.6 * hip, elbow)
        lean = (0.15 if run else 0.05) * a
        root_rotation = _rot("z", spec.heading) * _rot("y", lean)
        advance = spec.stride(body.spec) * spec.cycles * s
        bob = (0.08 if run else 0.04) * a * body.spec.leg_length * np.cos(2.0 * phi)
        translation = np.array([np.cos(spec.heading) * advance, np.sin(spec.heading) * advance, bob])
    return _Pose(root_rotation, translation, limbs)


def animate(body: SyntheticBody, spec: MotionSpec) -> MotionSequence:
    """Registered sequence of spec.frames posed copies of the body"""
    spec.validate()
    frames = []
    for t in range(spec.frames):
        vertices = pose_body(body, _motion_pose(body, spec, t))
        frames.append(body.mesh.with_vertices(vertices, name=f"{spec.kind.value}_{t:04d}"))
    metadata = {"kind": spec.kind.value, "heading": spec.heading, "amplitude": spec.amplitude, "cycles": spec.cycles}
    return MotionSequence(frames, name=spec.kind.value, metadata=metadata)


def unregister(sequence: MotionSequence, seed: int) -> MotionSequence:
    """Remesh every frame independently; consecutive frames never share a variant"""
    if not sequence.is_registered:
        raise ValidationError(f"sequence {sequence.name!r} is already unregistered")
    rng = np.random.default_rng(seed)
    frames = []
    variants = []
    previous = None
    for frame in sequence.frames:
        choices = [v for v in UNREGISTER_VARIANTS if v != previous]
        variant = choices[int(rng.integers(len(choices)))]
        frames.append(remesh(frame, variant, seed=int(rng.integers(2**31 - 1))))
        variants.append(variant.value)
        previous = variant
    metadata = dict(sequence.metadata, unregistered=True, variants=variants, unregister_seed=seed)
    return MotionSequence(frames, name=sequence.name, metadata=metadata)


# ==================== Datasets ====================

class MotionEntry(BaseModel):
    name: str
    kind: MotionKind
    heading: float = 0.0
    amplitude: Optional[float] = None
    cycles: Optional[float] = None


def _default_motions() -> List[MotionEntry]:
    return [
        MotionEntry(name="walk", kind=MotionKind.WALK_CYCLE, heading=0.0),
        MotionEntry(name="run_diagonal", kind=MotionKind.RUN_CYCLE, heading=float(np.pi / 4)),
        MotionEntry(name="knee_raise", kind=MotionKind.KNEE_RAISE),
    ]


class DatasetConfig(BaseModel):
    n_train_identities: int = Field(default=5, ge=0)
    n_test_identities: int = Field(default=2, ge=0)
    frames: int = Field(default=30, ge=MIN_FRAMES, le=MAX_FRAMES)
    level: int = Field(default=0, ge=0, le=2)
    seed: int = 0
    identity_spread: float = Field(default=0.15, ge=0.0, lt=0.5)
    motions: List[MotionEntry] = Field(default_factory=_default_motions)
    unregistered: bool = False
    extension: str = "obj"


@dataclass
class DatasetEntry:
    identity: str
    motion: str
    split: str
    path: str
    source: str
    frames: int
    registered: bool
    digest: str


@dataclass
class DatasetManifest:
    root: Path
    entries: List[DatasetEntry]
    config: dict
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
        }

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return array_digest(np.frombuffer(text.encode("utf-8"), dtype=np.uint8))

    def split(self, name: str) -> List[DatasetEntry]:
        return [e for e in self.entries if e.split == name]

    def identities(self, split: str) -> List[str]:
        return sorted({e.identity for e in self.split(split)})

    def check_disjoint(self) -> None:
        shared = set(self.identities("train")) & set(self.identities("test"))
        if shared:
            raise ValidationError(f"identities appear in both splits: {sorted(shared)}")

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise ValidationError(f"no manifest.json in {root}")
        data = json.loads(path.read_text())
        version = data.get("format_version")
        if version != MANIFEST_VERSION:
            raise ValidationError(f"unsupported dataset manifest version {version}")
        entries = [DatasetEntry(**e) for e in data["entries"]]
        return cls(root=root, entries=entries, config=data.get("config", {}), format_version=version)


def make_dataset(config: DatasetConfig, root) -> DatasetManifest:
    """Generate identity-disjoint train/test splits on disk"""
    if config.n_train_identities < 1 or config.n_test_identities < 1:
        raise ValidationError("dataset needs at least one train and one test identity")
    if not config.motions:
        raise ValidationError("dataset needs at least one motion")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    entries = []
    splits = [("train", config.n_train_identities), ("test", config.n_test_identities)]
    identity_index = 0
    for split, count in splits:
        for _ in range(count):
            identity_seed = config.seed * 1000 + identity_index
            identity = f"id_{identity_index:02d}"
            identity_index += 1
            spec = random_identity(identity_seed, level=config.level, spread=config.identity_spread)
            body = build_body(spec)
            identity_dir = root / split / identity
            identity_dir.mkdir(parents=True, exist_ok=True)
            save_mesh(body.mesh, identity_dir / "source.obj")

            for motion_index, motion in enumerate(config.motions):
                motion_spec = MotionSpec(
                    kind=motion.kind,
                    frames=config.frames,
                    amplitude=motion.amplitude,
                    cycles=motion.cycles,
                    heading=motion.heading,
                    seed=identity_seed * 100 + motion_index,
                )
                sequence = animate(body, motion_spec)
                if config.unregistered:
                    sequence = unregister(sequence, seed=motion_spec.seed)
                name = sanitize_name(motion.name)
                save_sequence(sequence, identity_dir / name, extension=config.extension)
                digest = array_digest(*[f.vertices for f in sequence.frames])
                entries.append(
                    DatasetEntry(
                        identity=identity,
                        motion=name,
                        split=split,
                        path=f"{split}/{identity}/{name}",
                        source=f"{split}/{identity}/source.obj",
                        frames=len(sequence),
                        registered=sequence.is_registered,
                        digest=digest,
                    )
                )
            logger.info(f"Generated {split} identity {identity} ({body.mesh.n_vertices} vertices)")

    manifest = DatasetManifest(root=root, entries=entries, config=json.loads(config.model_dump_json()))
    manifest.check_disjoint()
    manifest.save()
    logger.info(f"Dataset written to {root}: {len(manifest.split('train'))} train, {len(manifest.split('test'))} test sequences")
    return manifest


def load_source(manifest: DatasetManifest, entry: DatasetEntry) -> TriMesh:
    return load_mesh(manifest.root / entry.source)


# ==================== Primitive meshes ====================

def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected to a sphere"""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    for _ in range(subdivisions):
        midpoints: Dict[Tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                point = vertices[a] + vertices[b]
                vertices.append(point / np.linalg.norm(point))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined
    return TriMesh(radius * np.array(vertices), np.array(faces), name=f"icosphere_{subdivisions}")


def grid_mesh(nx: int, ny: int, size: float = 1.0) -> TriMesh:
    """Flat (nx+1) x (ny+1) triangulated square in the z = 0 plane, normals +z"""
    if nx < 1 or ny < 1:
        raise ValidationError("grid needs at least one cell per side")
    xs, ys = np.meshgrid(np.linspace(0.0, size, nx + 1), np.linspace(0.0, size, ny + 1), indexing="ij")
    vertices = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    index = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = index[:-1, :-1].ravel()
    b = index[1:, :-1].ravel()
    c = index[1:, 1:].ravel()
    d = index[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
    return TriMesh(vertices, faces, name=f"grid_{nx}x{ny}")

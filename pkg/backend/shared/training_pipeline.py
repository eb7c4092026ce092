# backend/shared/training_pipeline.py
"""
Training, evaluation, robustness protocol, motion transfer and inference
benchmarking for the mesh motion model.
"""
import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import pydantic
import torch
import torch.nn as nn
from pydantic import BaseModel, Field, field_validator

from optimizations.caching_layer import SpectralCache, get_spectral_cache

from .deformation_generator import DeformationGenerator, DeformationRollout, export_rollout, rollout
from .errors import NumericalError, TrainingDivergedError, ValidationError
from .feature_extractor import FeatureExtractor, extract_features
from .losses_metrics import (
    LossWeights,
    MetricsReport,
    SequenceMetrics,
    chamfer_sequence_loss,
    cosim,
    deviation_table,
    mse_loss,
    relative_deviation,
    total_loss,
)
from .mesh_core import (
    MotionSequence,
    NormalizeTransform,
    TriMesh,
    edge_list,
    load_mesh,
    load_sequence,
    nearest_correspondence,
    normalize,
)
from .motion_embedding import MotionCode, MotionEmbedder, embed_points, sample_sequence
from .remeshing import RemeshVariant, remesh
from .spectral_geometry import build_operators
from .synthetic_data import DatasetEntry, DatasetManifest, IdentitySpec, build_body
from .utils import array_digest, resolve_dtype

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1
BENCH_RUNS = 3


class TrainingMode(str, Enum):
    REGISTERED = "registered"
    UNREGISTERED = "unregistered"


class TrainConfig(BaseModel):
    """Hyper-parameters of one training run; mirrors the versioned JSON config file"""
    version: int = CONFIG_VERSION
    epochs: int = Field(default=200, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    scheduler_step: int = Field(default=5, ge=1)
    scheduler_gamma: float = Field(default=0.99, gt=0, le=1)
    weights: LossWeights = Field(default_factory=LossWeights)
    mode: TrainingMode = TrainingMode.REGISTERED
    batch_size: int = Field(default=1, ge=1)
    seed: int = 0
    grad_clip: float = Field(default=1.0, gt=0)
    checkpoint_every: int = Field(default=0, ge=0)
    teacher_forcing: bool = False
    use_recurrent: bool = True
    use_diffusion: bool = True
    feature_dim: int = Field(default=64, ge=1)
    code_dim: int = Field(default=64, ge=1)
    width: int = Field(default=128, ge=1)
    n_blocks: int = Field(default=4, ge=1)
    k_eig: int = Field(default=64, ge=1)
    samples_per_frame: int = Field(default=1024, ge=16)
    dtype: str = "float32"
    chamfer_method: str = "kdtree"
    calibrate_times: bool = True
    max_sequences: Optional[int] = Field(default=None, ge=1)

    @field_validator("version")
    @classmethod
    def validate_version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v} (expected {CONFIG_VERSION})")
        return v

    @field_validator("dtype")
    @classmethod
    def validate_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return v

    @field_validator("chamfer_method")
    @classmethod
    def validate_chamfer_method(cls, v):
        if v not in ("kdtree", "brute"):
            raise ValueError("chamfer_method must be kdtree or brute")
        return v


def load_config(path: Union[str, Path]) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        return TrainConfig.model_validate(data)
    except (json.JSONDecodeError, pydantic.ValidationError) as e:
        raise ValidationError(f"invalid training config {path}: {e}") from e


def save_config(config: TrainConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(config.model_dump_json(indent=2))
    return path


class MeshMotionModel(nn.Module):
    """Feature extractor, motion embedder and deformation generator trained jointly"""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.extractor = FeatureExtractor(
            feature_dim=config.feature_dim, width=config.width, n_blocks=config.n_blocks, use_diffusion=config.use_diffusion
        )
        self.embedder = MotionEmbedder(code_dim=config.code_dim, hidden=config.width, use_recurrent=config.use_recurrent)
        self.generator = DeformationGenerator(
            feature_dim=config.feature_dim, code_dim=config.code_dim, hidden=config.width
        )


# ==================== Checkpoints ====================

def _state_digest(states: Dict[str, Dict[str, torch.Tensor]]) -> str:
    arrays = []
    for part in sorted(states):
        for name in sorted(states[part]):
            arrays.append(np.frombuffer(f"{part}.{name}".encode(), dtype=np.uint8))
            arrays.append(states[part][name].detach().cpu().numpy())
    return array_digest(*arrays)


@dataclass
class Checkpoint:
    states: Dict[str, Dict[str, torch.Tensor]]
    config: TrainConfig
    epoch: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: MeshMotionModel, config: TrainConfig, **kwargs) -> "Checkpoint":
        states = {
            "extractor": copy.deepcopy(model.extractor.state_dict()),
            "embedder": copy.deepcopy(model.embedder.state_dict()),
            "generator": copy.deepcopy(model.generator.state_dict()),
        }
        return cls(states=states, config=config, **kwargs)

    @property
    def checksum(self) -> str:
        return _state_digest(self.states)

    @property
    def checkpoint_id(self) -> str:
        return self.checksum[:12]

    def build_model(self) -> MeshMotionModel:
        model = MeshMotionModel(self.config).to(resolve_dtype(self.config.dtype))
        model.extractor.load_state_dict(self.states["extractor"])
        model.embedder.load_state_dict(self.states["embedder"])
        model.generator.load_state_dict(self.states["generator"])
        model.eval()
        return model


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": checkpoint.format_version,
        "config": checkpoint.config.model_dump(mode="json"),
        "epoch": checkpoint.epoch,
        "history": checkpoint.history,
        "states": checkpoint.states,
        "optimizer": checkpoint.optimizer_state,
        "scheduler": checkpoint.scheduler_state,
        "checksum": checkpoint.checksum,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except Exception as e:
        logger.error(f"Error saving checkpoint to {path}: {e}")
        raise
    logger.info(f"Saved checkpoint {checkpoint.checkpoint_id} (epoch {checkpoint.epoch}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {version}")
    checkpoint = Checkpoint(
        states=payload["states"],
        config=TrainConfig.model_validate(payload["config"]),
        epoch=int(payload["epoch"]),
        history=list(payload["history"]),
        optimizer_state=payload.get("optimizer"),
        scheduler_state=payload.get("scheduler"),
        format_version=version,
    )
    if checkpoint.checksum != payload.get("checksum"):
        raise ValidationError(f"checkpoint {path} failed its integrity check")
    return checkpoint


def _as_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


# ==================== Sequence preparation ====================

@dataclass
class PreparedSequence:
    """One training/evaluation sequence with everything that does not depend on the parameters"""
    key: str
    source: TriMesh
    transform: NormalizeTransform
    ops: object
    target_points: np.ndarray
    target_frames: List[np.ndarray]
    truth: Optional[np.ndarray]
    edges: object = None


def _stable_seed(key: str, base: int) -> int:
    return (int(hashlib.sha256(key.encode()).hexdigest()[:8], 16) + base) % (2**31 - 1)


def _build_ops(mesh: TriMesh, k: int, cache: Optional[SpectralCache]):
    if cache is None:
        cache = get_spectral_cache()
    return cache.get_or_build(mesh, min(k, mesh.n_vertices - 1))


def prepare_sequence(
    source: TriMesh,
    target: MotionSequence,
    config: TrainConfig,
    key: str,
    cache: Optional[SpectralCache] = None,
    require_registered: bool = False,
) -> PreparedSequence:
    """Normalize the source and target, build operators and sample the target frames"""
    if len(target) == 0:
        raise ValidationError(f"target sequence {key} has no frames")
    source_n, transform = normalize(source)
    ops = _build_ops(source_n, config.k_eig, cache)

    # the embedder sees the target in its own first-frame normalization
    _, target_transform = normalize(target.frames[0])
    embedded = target.transformed(target_transform)
    points = sample_sequence(embedded, config.samples_per_frame, _stable_seed(key, config.seed))

    target_frames = [transform.apply(frame.vertices) for frame in target.frames]
    registered = all(
        frame.n_vertices == source.n_vertices and np.array_equal(frame.faces, source.faces) for frame in target.frames
    )
    if require_registered and not registered:
        raise ValidationError(
            f"sequence {key}: registered training needs every frame to share the source topology"
        )
    truth = np.stack(target_frames) if registered else None
    return PreparedSequence(
        key=key,
        source=source_n,
        transform=transform,
        ops=ops,
        target_points=points,
        target_frames=target_frames,
        truth=truth,
        edges=edge_list(source_n),
    )


def prepare_entry(
    manifest: DatasetManifest,
    entry: DatasetEntry,
    config: TrainConfig,
    cache: Optional[SpectralCache] = None,
    require_registered: bool = False,
) -> PreparedSequence:
    source = load_mesh(manifest.root / entry.source)
    target = load_sequence(manifest.root / entry.path, name=entry.motion)
    return prepare_sequence(source, target, config, f"{entry.identity}/{entry.motion}", cache, require_registered)


def run_sequence(
    model: MeshMotionModel,
    prepared: PreparedSequence,
    dtype: torch.dtype,
    source: Optional[TriMesh] = None,
    ops=None,
    teacher_forcing: bool = False,
) -> DeformationRollout:
    """Features on the source, motion code of the target, free rollout"""
    if source is None:
        source = prepared.source
    if ops is None:
        ops = prepared.ops
    features = extract_features(source, ops, model.extractor, dtype=dtype)
    code = embed_points(prepared.target_points, model.embedder)
    teacher = None
    if teacher_forcing and prepared.truth is not None:
        teacher = torch.as_tensor(prepared.truth, dtype=dtype)
    return rollout(source, features, MotionCode(code), model.generator, teacher_frames=teacher)


def sequence_loss(
    model: MeshMotionModel,
    prepared: PreparedSequence,
    config: TrainConfig,
    epoch_fraction: float,
):
    dtype = resolve_dtype(config.dtype)
    result = run_sequence(model, prepared, dtype, teacher_forcing=config.teacher_forcing)
    predicted = result.positions[1:]
    if config.mode == TrainingMode.REGISTERED:
        truth = torch.as_tensor(prepared.truth, dtype=dtype)
        return total_loss(predicted, truth, prepared.source, config.weights, epoch_fraction, edges=prepared.edges)
    targets = [torch.as_tensor(frame, dtype=dtype) for frame in prepared.target_frames]
    loss = chamfer_sequence_loss(list(predicted), targets, method=config.chamfer_method)
    return loss, {"chamfer": float(loss.detach()), "total": float(loss.detach())}


# ==================== Training ====================

def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_path: Optional[Union[str, Path]] = None,
    cache: Optional[SpectralCache] = None,
    split: str = "train",
) -> Checkpoint:
    """Adam + step schedule over whole sequences; returns the final checkpoint"""
    entries = manifest.split(split)
    if config.max_sequences is not None:
        entries = entries[: config.max_sequences]
    if not entries:
        raise ValidationError(f"split {split!r} of {manifest.root} has no sequences")

    _seed_everything(config.seed)
    dtype = resolve_dtype(config.dtype)
    registered = config.mode == TrainingMode.REGISTERED
    prepared = [prepare_entry(manifest, e, config, cache, require_registered=registered) for e in entries]
    logger.info(f"Training on {len(prepared)} sequences ({config.mode.value}, {config.epochs} epochs)")

    model = MeshMotionModel(config).to(dtype)
    if config.calibrate_times:
        model.extractor.calibrate_times(prepared[0].source)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.scheduler_step, gamma=config.scheduler_gamma)

    history: List[Dict[str, float]] = []
    last_good = Checkpoint.from_model(model, config, epoch=0, history=[])
    rng = np.random.default_rng(config.seed)

    for epoch in range(config.epochs):
        fraction = epoch / config.epochs
        model.train()
        order = rng.permutation(len(prepared))
        totals: Dict[str, float] = {}
        try:
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                optimizer.zero_grad()
                for i in batch:
                    loss, breakdown = sequence_loss(model, prepared[i], config, fraction)
                    if not torch.isfinite(loss):
                        raise NumericalError(f"non-finite loss on {prepared[i].key}", stage=f"epoch {epoch + 1}")
                    (loss / len(batch)).backward()
                    for name, value in breakdown.items():
                        totals[name] = totals.get(name, 0.0) + value / len(prepared)
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
        except NumericalError as e:
            path = _divergence_checkpoint(last_good, out_path)
            logger.error(f"Training diverged at epoch {epoch + 1}: {e}")
            raise TrainingDivergedError(f"training diverged at epoch {epoch + 1}: {e}", checkpoint_path=path) from e

        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        if registered:
            totals.setdefault("aiap", 0.0)
        record = {"epoch": epoch + 1, "lr": lr, **totals}
        history.append(record)
        logger.info(
            f"Epoch {epoch + 1}/{config.epochs} "
            + " ".join(f"{k}={v:.6g}" for k, v in record.items() if k != "epoch")
        )
        last_good = Checkpoint.from_model(
            model, config, epoch=epoch + 1, history=list(history),
            optimizer_state=copy.deepcopy(optimizer.state_dict()), scheduler_state=scheduler.state_dict(),
        )
        if out_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(last_good, out_path)

    if out_path:
        save_checkpoint(last_good, out_path)
    return last_good


def _divergence_checkpoint(last_good: Checkpoint, out_path) -> Optional[Path]:
    if not out_path:
        return None
    return save_checkpoint(last_good, out_path)


# ==================== Evaluation ====================

def _registered_metrics(result: DeformationRollout, prepared: PreparedSequence, faces, truth: np.ndarray, dtype):
    predicted = result.positions[1:]
    truth_t = torch.as_tensor(truth, dtype=dtype)
    static = torch.as_tensor(result.positions[0], dtype=dtype).expand_as(truth_t)
    return {
        "mse": float(mse_loss(predicted, truth_t)),
        "cosim": cosim(predicted, truth_t, faces),
        "static_mse": float(mse_loss(static, truth_t)),
    }


def evaluate(
    ckpt: Union[Checkpoint, str, Path],
    manifest: DatasetManifest,
    split: str = "test",
    cache: Optional[SpectralCache] = None,
) -> MetricsReport:
    """Mean metrics over a split with a per-sequence breakdown"""
    checkpoint = _as_checkpoint(ckpt)
    config = checkpoint.config
    entries = manifest.split(split)
    if not entries:
        raise ValidationError(f"split {split!r} of {manifest.root} has no sequences")
    model = checkpoint.build_model()
    dtype = resolve_dtype(config.dtype)
    unregistered = config.mode == TrainingMode.UNREGISTERED

    rows = []
    with torch.no_grad():
        for entry in entries:
            prepared = prepare_entry(manifest, entry, config, cache)
            result = run_sequence(model, prepared, dtype)
            metrics = {}
            if prepared.truth is not None and not unregistered:
                metrics.update(_registered_metrics(result, prepared, prepared.source.faces, prepared.truth, dtype))
            else:
                targets = [torch.as_tensor(f, dtype=dtype) for f in prepared.target_frames]
                metrics["chamfer"] = float(
                    chamfer_sequence_loss(list(result.positions[1:]), targets, method=config.chamfer_method)
                )
            rows.append(SequenceMetrics(sequence=prepared.key, identity=entry.identity, **metrics))

    def mean(name):
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        return float(np.mean(values)) if values else None

    report = MetricsReport(
        split=split,
        mode=config.mode.value,
        mse=mean("mse"),
        cosim=mean("cosim"),
        chamfer=mean("chamfer"),
        static_mse=mean("static_mse"),
        per_sequence=rows,
    )
    logger.info(f"Evaluated {len(rows)} {split} sequences: mse={report.mse} cosim={report.cosim} chamfer={report.chamfer}")
    return report


def robustness_eval(
    ckpt: Union[Checkpoint, str, Path],
    manifest: DatasetManifest,
    variants: Sequence[RemeshVariant],
    split: str = "test",
    csv_path: Optional[Union[str, Path]] = None,
    cache: Optional[SpectralCache] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Metric deviations when every source mesh is re-triangulated before inference"""
    checkpoint = _as_checkpoint(ckpt)
    config = checkpoint.config
    entries = [e for e in manifest.split(split)]
    if not entries:
        raise ValidationError(f"split {split!r} of {manifest.root} has no sequences")
    model = checkpoint.build_model()
    dtype = resolve_dtype(config.dtype)

    per_variant: Dict[RemeshVariant, Dict[str, List[float]]] = {}
    all_variants = [RemeshVariant.ORIGINAL] + [v for v in variants if v != RemeshVariant.ORIGINAL]
    with torch.no_grad():
        for index, entry in enumerate(entries):
            prepared = prepare_entry(manifest, entry, config, cache)
            if prepared.truth is None:
                raise ValidationError(f"robustness protocol needs registered ground truth ({prepared.key})")
            for variant in all_variants:
                mesh = remesh(prepared.source, variant, seed=seed + index)
                ops = prepared.ops if variant == RemeshVariant.ORIGINAL else _build_ops(mesh, config.k_eig, cache)
                result = run_sequence(model, prepared, dtype, source=mesh, ops=ops)
                truth = prepared.truth
                if variant != RemeshVariant.ORIGINAL:
                    truth = truth[:, nearest_correspondence(mesh, prepared.source)]
                metrics = _registered_metrics(result, prepared, mesh.faces, truth, dtype)
                bucket = per_variant.setdefault(variant, {"mse": [], "cosim": [], "n_vertices": []})
                bucket["mse"].append(metrics["mse"])
                bucket["cosim"].append(metrics["cosim"])
                bucket["n_vertices"].append(mesh.n_vertices)

    reference = {name: float(np.mean(per_variant[RemeshVariant.ORIGINAL][name])) for name in ("mse", "cosim")}
    rows = []
    requested = list(dict.fromkeys(variants)) or [RemeshVariant.ORIGINAL]
    for variant in requested:
        bucket = per_variant[variant]
        mse_value = float(np.mean(bucket["mse"]))
        cosim_value = float(np.mean(bucket["cosim"]))
        rows.append({
            "variant": variant.value,
            "mse": mse_value,
            "cosim": cosim_value,
            "mse_deviation": relative_deviation(reference["mse"], mse_value),
            "cosim_deviation": relative_deviation(reference["cosim"], cosim_value),
            "mean_vertices": float(np.mean(bucket["n_vertices"])),
        })
    return deviation_table(rows, csv_path)


# ==================== Transfer / embedding / benchmark ====================

def transfer(
    ckpt: Union[Checkpoint, str, Path],
    source_mesh_path: Union[str, Path],
    target_sequence_dir: Union[str, Path],
    out_dir: Union[str, Path],
    cache: Optional[SpectralCache] = None,
    extension: str = "obj",
) -> Path:
    """Animate an arbitrary source mesh with the motion of a target sequence"""
    checkpoint = _as_checkpoint(ckpt)
    config = checkpoint.config
    source = load_mesh(source_mesh_path)
    target = load_sequence(target_sequence_dir)
    prepared = prepare_sequence(source, target, config, key=Path(target_sequence_dir).name, cache=cache)
    model = checkpoint.build_model()
    with torch.no_grad():
        result = run_sequence(model, prepared, resolve_dtype(config.dtype))
    return export_rollout(
        result,
        prepared.source,
        out_dir,
        transform=prepared.transform,
        extension=extension,
        source_file=str(source_mesh_path),
        checkpoint_id=checkpoint.checkpoint_id,
    )


def embed_sequence(ckpt: Union[Checkpoint, str, Path], motion_dir: Union[str, Path]) -> MotionCode:
    """Motion code of a frame directory under a trained embedder"""
    checkpoint = _as_checkpoint(ckpt)
    config = checkpoint.config
    target = load_sequence(motion_dir)
    _, target_transform = normalize(target.frames[0])
    points = sample_sequence(target.transformed(target_transform), config.samples_per_frame,
                             _stable_seed(target.name or "", config.seed))
    model = checkpoint.build_model()
    with torch.no_grad():
        code = embed_points(points, model.embedder)
    return MotionCode(code, name=target.name)


def bench_inference(
    ckpt: Union[Checkpoint, str, Path, None],
    resolutions: Sequence[int],
    frames: int,
    runs: int = BENCH_RUNS,
    seed: int = 0,
) -> pd.DataFrame:
    """Wall-clock rollout time per resolution (mean of runs); operator build timed separately"""
    columns = ["resolution", "n_vertices", "frames", "build_seconds", "feature_seconds", "rollout_seconds"]
    if not resolutions:
        return pd.DataFrame(columns=columns)
    checkpoint = _as_checkpoint(ckpt) if ckpt is not None else None
    config = checkpoint.config if checkpoint else TrainConfig()
    if checkpoint:
        model = checkpoint.build_model()
    else:
        _seed_everything(seed)
        model = MeshMotionModel(config).to(resolve_dtype(config.dtype)).eval()
    dtype = resolve_dtype(config.dtype)
    generator = torch.Generator().manual_seed(seed)
    codes = torch.randn(frames, config.code_dim, generator=generator, dtype=dtype)

    rows = []
    for resolution in resolutions:
        body = build_body(IdentitySpec(), target_vertices=int(resolution))
        mesh, _ = normalize(body.mesh)
        start = time.perf_counter()
        ops = build_operators(mesh, min(config.k_eig, mesh.n_vertices - 1))
        build_seconds = time.perf_counter() - start
        with torch.no_grad():
            start = time.perf_counter()
            features = extract_features(mesh, ops, model.extractor, dtype=dtype)
            feature_seconds = time.perf_counter() - start
            timings = []
            for _ in range(runs):
                start = time.perf_counter()
                rollout(mesh, features, MotionCode(codes), model.generator)
                timings.append(time.perf_counter() - start)
        rows.append({
            "resolution": int(resolution),
            "n_vertices": mesh.n_vertices,
            "frames": frames,
            "build_seconds": build_seconds,
            "feature_seconds": feature_seconds,
            "rollout_seconds": float(np.mean(timings)),
        })
        logger.info(f"Bench {mesh.n_vertices} vertices x {frames} frames: rollout {rows[-1]['rollout_seconds']:.4f}s")
    return pd.DataFrame(rows, columns=columns)

# backend/shared/utils.py
import hashlib
import re
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

FRAME_PATTERN = re.compile(r"^frame_(\d+)\.(obj|ply)$", re.IGNORECASE)


def frame_filename(index: int, extension: str = "obj") -> str:
    extension = extension.lower().lstrip(".")
    if extension not in ("obj", "ply"):
        raise ValueError(f"Unsupported frame extension: {extension}")
    return f"frame_{index:04d}.{extension}"


def sanitize_name(name: Optional[str], default: str = "unnamed") -> str:
    """Make a string safe to use as a directory name"""
    if not name:
        return default
    sanitized = re.sub(r"[^\w\-]", "_", str(name)).strip("._-")
    return sanitized[:64] or default


def array_digest(*arrays: np.ndarray) -> str:
    """sha256 of array shapes, dtypes and contents"""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.shape).encode())
        digest.update(array.dtype.str.encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def resolve_dtype(name: Optional[str]) -> torch.dtype:
    if name in (None, "float32"):
        return torch.float32
    if name == "float64":
        return torch.float64
    raise ValueError(f"Unsupported dtype: {name}")


def to_tensor(values, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype=dtype, device=device)
    return torch.as_tensor(np.asarray(values), dtype=dtype, device=device)


def init_leaky_layers(module: nn.Module, negative_slope: float = 0.01) -> None:
    """Kaiming-uniform weights matched to LeakyReLU, zero biases, for every Linear in module"""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            nn.init.kaiming_uniform_(layer.weight, a=negative_slope, nonlinearity="leaky_relu")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)

"""Exception hierarchy shared by every mesh-motion module."""
from typing import Optional


class MeshMotionError(Exception):
    """Base class for all errors raised by this package"""


class ValidationError(MeshMotionError, ValueError):
    """Invalid input or violated precondition"""


class MeshFormatError(ValidationError):
    """Mesh file could not be parsed"""

    def __init__(self, message: str, path=None, line: Optional[int] = None, offset: Optional[int] = None):
        location = ""
        if line is not None:
            location = f" (line {line})"
        elif offset is not None:
            location = f" (byte offset {offset})"
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}{location}")
        self.path = path
        self.line = line
        self.offset = offset


class DegenerateMeshError(ValidationError):
    """Mesh has no usable extent or area"""


class DisconnectedMeshError(ValidationError):
    """Mesh has more than one connected component"""

    def __init__(self, n_components: int, hint: str = ""):
        message = f"mesh has {n_components} connected components; a single component is required"
        if hint:
            message = f"{message}. {hint}"
        super().__init__(message)
        self.n_components = n_components


class NumericalError(MeshMotionError, RuntimeError):
    """Non-finite values appeared in a computation"""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(f"{stage}: {message}" if stage else message)
        self.stage = stage


class TrainingDivergedError(NumericalError):
    """Loss became non-finite; the last good checkpoint was written"""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message, stage="train")
        self.checkpoint_path = checkpoint_path


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, (ValidationError, ValueError)):
        return 2
    return 1

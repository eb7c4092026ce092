"""
Configuration management for the Mesh Motion system
"""
import logging
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

backend_root = Path(__file__).resolve().parent

# Load environment variables
env_file = backend_root / ".env"
if env_file.exists():
    load_dotenv(env_file)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="MESHMOTION_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging Configuration
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    log_json: bool = False

    # Cache Configuration
    cache_dir: Optional[Path] = None
    redis_url: Optional[str] = None
    spectral_cache_size: int = 32

    # Geometry / model defaults
    k_eig: int = 64
    samples_per_frame: int = 1024
    default_dtype: str = "float32"

    # Performance Settings
    torch_threads: Optional[int] = None

    @field_validator("log_level", mode="before")
    @classmethod
    def parse_log_level(cls, v):
        if isinstance(v, str):
            return v.strip().upper()
        return v

    @field_validator("default_dtype")
    @classmethod
    def check_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError(f"default_dtype must be float32 or float64, got {v}")
        return v

    @field_validator("spectral_cache_size", "k_eig", "samples_per_frame")
    @classmethod
    def check_positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v


# Global settings instance
settings = Settings()


def setup_logging(level: Optional[str] = None):
    """Setup logging configuration"""
    level_name = (level or settings.log_level).upper()

    handler = logging.StreamHandler(sys.stdout)
    if settings.log_json:
        from pythonjsonlogger import jsonlogger

        handler.setFormatter(jsonlogger.JsonFormatter(settings.log_format))
    else:
        handler.setFormatter(logging.Formatter(settings.log_format))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        handlers=[handler],
        force=True,
    )

    # Reduce noise from external libraries
    logging.getLogger("redis").setLevel(logging.WARNING)

    if settings.torch_threads:
        import torch

        torch.set_num_threads(settings.torch_threads)

    return logging.getLogger("mesh-motion")

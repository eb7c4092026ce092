"""
Spectral operator cache for the Mesh Motion system
Avoids rebuilding Laplacian eigenbases for meshes seen before
"""

import io
import logging
import threading
import time
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from shared.mesh_core import TriMesh
from shared.spectral_geometry import SpectralOps, build_operators

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1

# Redis import with fallback
try:
    import redis
    REDIS_AVAILABLE = True
except ImportError:
    REDIS_AVAILABLE = False


def cache_key(mesh: TriMesh, k: int) -> str:
    """Cache key from mesh content and eigenpair count"""
    return f"spectral:v{CACHE_FORMAT_VERSION}:{mesh.content_hash()}:k{k}"


def serialize_ops(ops: SpectralOps) -> bytes:
    """npz container: a format_version entry plus little-endian arrays"""
    buffer = io.BytesIO()
    arrays = {}
    for name, array in ops.arrays().items():
        array = np.asarray(array)
        if array.dtype.kind in "fiu":
            array = array.astype(array.dtype.newbyteorder("<"))
        arrays[name] = array
    arrays["format_version"] = np.array([CACHE_FORMAT_VERSION], dtype="<i4")
    arrays["mesh_hash"] = np.frombuffer(ops.mesh_hash.encode("ascii"), dtype=np.uint8)
    np.savez(buffer, **arrays)
    return buffer.getvalue()


def deserialize_ops(payload: bytes) -> SpectralOps:
    with np.load(io.BytesIO(payload), allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported spectral cache format version {version}")
        arrays = {name: data[name] for name in data.files if name not in ("format_version", "mesh_hash")}
        mesh_hash = bytes(data["mesh_hash"]).decode("ascii")
    return SpectralOps.from_arrays(arrays, mesh_hash=mesh_hash)


class SpectralCache:
    """LRU cache of SpectralOps keyed by mesh content hash"""

    def __init__(self, max_entries: int = 32, cache_dir: Optional[Path] = None, redis_url: Optional[str] = None):
        if max_entries < 1:
            raise ValueError("max_entries must be positive")
        self.max_entries = max_entries
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._entries: "OrderedDict[str, Dict[str, Any]]" = OrderedDict()
        self._lock = threading.Lock()
        self._hits = 0
        self._misses = 0
        self._redis_client = None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        if redis_url:
            self._initialize_redis(redis_url)

    def _initialize_redis(self, redis_url: str):
        """Initialize Redis cache"""
        if not REDIS_AVAILABLE:
            logger.warning("Redis not available - shared spectral cache disabled")
            return
        try:
            self._redis_client = redis.Redis.from_url(redis_url, socket_timeout=5, socket_connect_timeout=5)
            self._redis_client.ping()
            logger.info("Redis spectral cache initialized")
        except Exception as e:
            logger.warning(f"Redis unavailable: {e}. Continuing without shared cache.")
            self._redis_client = None

    def _disk_path(self, key: str) -> Optional[Path]:
        if not self.cache_dir:
            return None
        return self.cache_dir / (key.replace(":", "_") + ".npz")

    def _remember(self, key: str, ops: SpectralOps) -> None:
        with self._lock:
            self._entries[key] = {"value": ops, "created_at": time.time()}
            self._entries.move_to_end(key)
            while len(self._entries) > self.max_entries:
                evicted, _ = self._entries.popitem(last=False)
                logger.debug(f"Evicted spectral cache entry {evicted}")

    def get(self, key: str) -> Optional[SpectralOps]:
        """Memory, then disk, then Redis"""
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
                self._hits += 1
                return entry["value"]

        payload = None
        path = self._disk_path(key)
        if path is not None and path.exists():
            payload = path.read_bytes()
        elif self._redis_client is not None:
            try:
                payload = self._redis_client.get(key)
            except Exception as e:
                logger.warning(f"Cache retrieval failed: {e}")

        if payload:
            try:
                ops = deserialize_ops(payload)
            except Exception as e:
                logger.warning(f"Discarding unreadable cache entry {key}: {e}")
            else:
                self._remember(key, ops)
                with self._lock:
                    self._hits += 1
                return ops

        with self._lock:
            self._misses += 1
        return None

    def set(self, key: str, ops: SpectralOps) -> None:
        self._remember(key, ops)
        if self.cache_dir is None and self._redis_client is None:
            return
        payload = serialize_ops(ops)
        path = self._disk_path(key)
        if path is not None:
            try:
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(payload)
                tmp.replace(path)
            except OSError as e:
                logger.warning(f"Cache storage failed: {e}")
        if self._redis_client is not None:
            try:
                self._redis_client.set(key, payload)
            except Exception as e:
                logger.warning(f"Cache storage failed: {e}")

    def get_or_build(self, mesh: TriMesh, k: int) -> SpectralOps:
        key = cache_key(mesh, k)
        ops = self.get(key)
        if ops is not None:
            logger.debug(f"Cache HIT for {mesh.name!r}")
            return ops
        logger.debug(f"Cache MISS for {mesh.name!r}")
        start_time = time.time()
        ops = build_operators(mesh, k)
        duration = time.time() - start_time
        if duration > 1.0:
            logger.info(f"Built spectral operators for {mesh.name!r} ({mesh.n_vertices} vertices) in {duration:.2f}s")
        self.set(key, ops)
        return ops

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self):
        return len(self._entries)

    def stats(self) -> Dict[str, Any]:
        """Get cache statistics"""
        with self._lock:
            total = self._hits + self._misses
            return {
                "size": len(self._entries),
                "max_size": self.max_entries,
                "hits": self._hits,
                "misses": self._misses,
                "hit_rate": 0 if total == 0 else self._hits / total,
                "disk": str(self.cache_dir) if self.cache_dir else None,
                "redis": self._redis_client is not None,
            }


_default_cache: Optional[SpectralCache] = None
_default_lock = threading.Lock()


def get_spectral_cache() -> SpectralCache:
    """Process-wide cache configured from settings"""
    global _default_cache
    with _default_lock:
        if _default_cache is None:
            from config import settings

            _default_cache = SpectralCache(
                max_entries=settings.spectral_cache_size,
                cache_dir=settings.cache_dir,
                redis_url=settings.redis_url,
            )
        return _default_cache

"""
SELFCAL-WSOD: Cache Service
============================
Caches intermediate multi-scale CAMs between pseudo-label runs.

SELFCAL_WSOD_CACHE selects the backend:
  - unset              → no-op
  - redis://... URL    → Redis (binary values, no TTL)
  - anything else      → directory of .npy files

Usage:
    key = cam_cache_key(checkpoint_hash, image_path, scales, size)
    cam = cache_get_array(key)
    if cam is None:
        cam = compute(...)
        cache_set_array(key, cam)
"""
import hashlib
import io
import logging
from pathlib import Path

import numpy as np

from selfcal_wsod.core.config import settings

logger = logging.getLogger(__name__)

_redis_client = None
_redis_url = None


def _is_redis(target: str) -> bool:
    return target.startswith(("redis://", "rediss://", "unix://"))


def _get_redis(url: str):
    """Lazy-init Redis client. Returns None if unreachable."""
    global _redis_client, _redis_url
    if _redis_client is None or _redis_url != url:
        try:
            import redis
            _redis_client = redis.from_url(url, decode_responses=False, socket_timeout=5)
            _redis_client.ping()
            _redis_url = url
            logger.info("Redis CAM cache connected")
        except Exception as e:
            logger.warning(f"Redis not available, CAM cache disabled: {e}")
            _redis_client = None
            return None
    return _redis_client


def cam_cache_key(*parts) -> str:
    raw = "|".join(str(p) for p in parts)
    return "cam:" + hashlib.sha256(raw.encode("utf-8")).hexdigest()


def _encode(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _decode(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def cache_get_array(key: str) -> np.ndarray | None:
    target = settings.cache
    if not target:
        return None
    try:
        if _is_redis(target):
            r = _get_redis(target)
            data = r.get(key) if r else None
            return _decode(data) if data else None
        path = Path(target) / f"{key.replace(':', '_')}.npy"
        if path.is_file():
            logger.debug(f"Cache hit: {key[:16]}...")
            return _decode(path.read_bytes())
    except Exception as e:
        logger.warning(f"Failed to read CAM cache: {e}")
    return None


def cache_set_array(key: str, arr: np.ndarray) -> None:
    target = settings.cache
    if not target:
        return
    try:
        data = _encode(np.ascontiguousarray(arr))
        if _is_redis(target):
            r = _get_redis(target)
            if r:
                r.set(key, data)
            return
        directory = Path(target)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{key.replace(':', '_')}.npy").write_bytes(data)
    except Exception as e:
        logger.warning(f"Failed to write CAM cache: {e}")

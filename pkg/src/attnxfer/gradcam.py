"""Gradient-weighted class activation maps and the on-disk attention cache."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import netcore
from .netcore import NetworkParams, NetworkSpec

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"ATTC"
CACHE_VERSION = 1


def channel_weights(feature_grad: np.ndarray) -> np.ndarray:
    """Spatially averaged gradient per channel, ``(K, h, w) -> (K,)``."""
    return feature_grad.mean(axis=(-2, -1))


def _map_from_trace(spec: NetworkSpec, params: NetworkParams, trace, concept: int) -> np.ndarray:
    n = spec.n_classes
    if not 0 <= concept < n:
        raise ValueError(f"concept {concept} out of range for {n} classes")
    seed = np.zeros(n)
    seed[concept] = 1.0
    grad = netcore.feature_gradient(spec, params, trace, seed)
    alpha = channel_weights(grad)
    feats = trace.features(spec)
    return np.maximum(np.tensordot(alpha, feats, axes=(0, 0)), 0.0)


def attention_map(spec: NetworkSpec, params: NetworkParams, frame, concept: int) -> np.ndarray:
    """ReLU of the gradient-weighted sum of last-conv feature maps.

    The one-hot seed sits on the raw class scores, not on softmax outputs.
    Returns an ``(h, w)`` array at the native last-conv resolution.
    """
    trace = netcore.forward(spec, params, frame)
    if trace.batched:
        raise netcore.ShapeError("attention_map takes a single frame")
    return _map_from_trace(spec, params, trace, concept)


def attention_stack(spec: NetworkSpec, params: NetworkParams, frame) -> np.ndarray:
    """Maps for every concept from one shared forward pass, shape ``(n, h, w)``."""
    trace = netcore.forward(spec, params, frame)
    if trace.batched:
        raise netcore.ShapeError("attention_stack takes a single frame")
    return np.stack([_map_from_trace(spec, params, trace, c) for c in range(spec.n_classes)])


# --------------------------------------------------------------------------
# Cache
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CacheKey:
    video_id: str
    frame: int
    concept: int


class AttentionCache:
    """Ordered mapping ``(video_id, frame, concept) -> float32 map``."""

    def __init__(self):
        self._entries: dict[CacheKey, np.ndarray] = {}

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.items())

    def add(self, video_id: str, frame: int, concept: int, values) -> None:
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("attention maps are two-dimensional")
        self._entries[CacheKey(video_id, int(frame), int(concept))] = values

    def get(self, video_id: str, frame: int, concept: int) -> np.ndarray:
        return self._entries[CacheKey(video_id, int(frame), int(concept))]

    def video_ids(self) -> list[str]:
        return list(dict.fromkeys(k.video_id for k in self._entries))

    def frames(self, video_id: str) -> list[int]:
        return sorted({k.frame for k in self._entries if k.video_id == video_id})

    def stack(self, video_id: str, frame: int, n_concepts: int) -> np.ndarray:
        """All concept maps of one frame as a float64 ``(n, h, w)`` array."""
        return np.stack([self.get(video_id, frame, c) for c in range(n_concepts)]).astype(np.float64)

    def video_stacks(self, video_id: str, n_concepts: int, frames=None) -> np.ndarray:
        frames = self.frames(video_id) if frames is None else frames
        return np.stack([self.stack(video_id, f, n_concepts) for f in frames])

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CACHE_MAGIC)
        buf.write(struct.pack("<II", CACHE_VERSION, len(self._entries)))
        for key, values in self._entries.items():
            vid = key.video_id.encode("utf-8")
            h, w = values.shape
            buf.write(struct.pack("<I", len(vid)))
            buf.write(vid)
            # w then h, values row-major over (h, w)
            buf.write(struct.pack("<IIHH", key.frame, key.concept, w, h))
            buf.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttentionCache":
        if data[:4] != CACHE_MAGIC:
            raise ValueError("not an attention cache (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported attention cache version {version}")
        off = 12
        cache = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            vid = data[off : off + n].decode("utf-8")
            off += n
            frame, concept, w, h = struct.unpack_from("<IIHH", data, off)
            off += 12
            values = np.frombuffer(data, dtype="<f4", count=w * h, offset=off).reshape(h, w)
            off += 4 * w * h
            cache.add(vid, frame, concept, values.astype(np.float32))
        if off != len(data):
            raise ValueError("trailing bytes in attention cache")
        return cache

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AttentionCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def precompute_cache(spec: NetworkSpec, params: NetworkParams, videos, output_path=None,
                     skip_unreadable: bool = False, loader=None) -> AttentionCache:
    """Compute the map of every (frame, concept) pair of ``videos``.

    ``videos`` is an iterable of ``(video_id, frames)`` where ``frames`` holds
    arrays or file paths (read with ``loader``, default
    :func:`attnxfer.synthdata.read_image`). Frame indices are the positions in
    ``frames``. Entries are written in input order so the file is
    byte-deterministic.
    """
    if loader is None:
        from .synthdata import read_image as loader
    cache = AttentionCache()
    for video_id, frames in videos:
        for idx, frame in enumerate(frames):
            if not isinstance(frame, np.ndarray):
                try:
                    frame = loader(frame)
                except (OSError, ValueError) as exc:
                    if not skip_unreadable:
                        raise
                    logger.warning("skipping unreadable frame %s/%d: %s", video_id, idx, exc)
                    continue
            for c, m in enumerate(attention_stack(spec, params, frame)):
                cache.add(video_id, idx, c, m)
    if output_path is not None:
        cache.save(output_path)
    return cache

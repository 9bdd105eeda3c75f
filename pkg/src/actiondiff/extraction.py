"""Windowed feature extraction from the denoiser, plus the feature cache.

A video is chunked into consecutive windows, each window gets one denoising
pass at the configured (layer, timestep, conditioning), the tapped
activation is average-pooled over space, and the per-frame vectors are
concatenated back in frame order. Results are cached content-addressed
under a key derived from (config, backbone fingerprint, clip id).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from . import serialize
from .backbone import Backbone, NoiseSchedule, add_noise, generative_step_to_timestep, make_schedule
from .rng import Rng


class ExtractionError(Exception):
    pass


class CacheCorruptionError(ExtractionError):
    pass


COND_MODES = ("frame", "action_text", "none")


@dataclass(frozen=True)
class ExtractionConfig:
    layer: int = 5
    gen_step: int | None = 20        # (gen_step, gen_total) pair, or raw_t
    gen_total: int | None = 30
    raw_t: int | None = None
    cond_mode: str = "frame"
    window: int = 8
    noisy_extract: bool = False
    class_names: tuple = ()          # payload for action_text conditioning
    backbone_fingerprint: str | None = None

    def __post_init__(self):
        if self.cond_mode not in COND_MODES:
            raise ExtractionError(f"unknown cond_mode {self.cond_mode!r}")
        if self.raw_t is None and (self.gen_step is None or self.gen_total is None):
            raise ExtractionError("need either raw_t or a (gen_step, gen_total) pair")
        if self.window < 1:
            raise ExtractionError("window must be >= 1")

    def resolve_t(self, schedule: NoiseSchedule) -> int:
        if self.raw_t is not None:
            if not 0 <= self.raw_t < schedule.T:
                raise ExtractionError(f"raw_t={self.raw_t} outside schedule T={schedule.T}")
            return self.raw_t
        return generative_step_to_timestep(self.gen_step, self.gen_total, schedule)

    def canonical(self) -> dict:
        return {
            "layer": self.layer,
            "gen_step": self.gen_step,
            "gen_total": self.gen_total,
            "raw_t": self.raw_t,
            "cond_mode": self.cond_mode,
            "window": self.window,
            "noisy_extract": self.noisy_extract,
            "class_names": list(self.class_names),
        }


@dataclass
class FeatureSequence:
    """Per-frame pooled features (M x d) plus extraction provenance."""

    features: np.ndarray
    provenance: dict

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def plan_windows(total: int, window: int, w_max: int) -> list:
    """Consecutive (start, length) windows. A final remainder of >= 2 frames
    becomes its own window; a single leftover frame is appended to the
    previous window, which then must still fit w_max."""
    if total < 1:
        raise ExtractionError("empty clip")
    if total <= window:
        return [(0, total)]
    n_full = total // window
    rem = total % window
    spans = [(i * window, window) for i in range(n_full)]
    if rem >= 2:
        spans.append((n_full * window, rem))
    elif rem == 1:
        start, length = spans[-1]
        if length + 1 > w_max:
            raise ExtractionError(
                f"remainder frame would make a window of {length + 1} > w_max={w_max}; "
                f"use window <= {w_max - 1} for this clip length")
        spans[-1] = (start, length + 1)
    return spans


def _window_cond(backbone: Backbone, config: ExtractionConfig, frames: np.ndarray):
    if config.cond_mode == "frame":
        return backbone.encode_condition("frame", frames[len(frames) // 2])
    if config.cond_mode == "action_text":
        return backbone.encode_condition("action_text", list(config.class_names))
    return backbone.encode_condition("none")


def extract_window(frames: np.ndarray, config: ExtractionConfig, backbone: Backbone,
                   schedule: NoiseSchedule | None = None, rng: Rng | None = None) -> np.ndarray:
    """Features for one window: encode, (optionally) noise, one denoiser pass
    with the layer tap, then average pooling over height and width."""
    frames = np.asarray(frames)
    count = frames.shape[0]
    if not 1 <= count <= max(config.window, backbone.spec.w_max):
        raise ExtractionError(f"window of {count} frames violates 1..{config.window}")
    schedule = schedule if schedule is not None else make_schedule()
    t = config.resolve_t(schedule)

    z = backbone.encode_frames(frames)
    if config.noisy_extract:
        if rng is None:
            rng = Rng("noisy-extract").split(json.dumps(config.canonical(), sort_keys=True))
        z, _ = add_noise(schedule, z, t, rng=rng)
        z = z.astype(nm.default_dtype())
    cond = _window_cond(backbone, config, frames)
    with nm.no_grad():
        _, tapped = backbone.denoise_forward(z, t, cond, tap=config.layer)
        pooled = nm.mean(tapped, axis=(1, 2))
    return pooled.numpy().copy()


def extract_video(clip, config: ExtractionConfig, backbone: Backbone,
                  schedule: NoiseSchedule | None = None, cache: "FeatureCache | None" = None) -> FeatureSequence:
    """Features for a whole clip under the windowing rule. Bit-deterministic
    for fixed (clip, config, backbone); cache round-trips are bit-exact."""
    frames = np.asarray(clip.frames if hasattr(clip, "frames") else clip)
    clip_id = getattr(clip, "clip_id", "anonymous")
    if config.backbone_fingerprint is not None and config.backbone_fingerprint != backbone.fingerprint:
        raise ExtractionError("config is bound to a different backbone fingerprint")

    key = cache_key(config, backbone.fingerprint, clip_id)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit

    if config.window > backbone.spec.w_max:
        raise ExtractionError(f"window {config.window} exceeds w_max={backbone.spec.w_max}")
    schedule = schedule if schedule is not None else make_schedule()
    noise_root = Rng("noisy-extract").split(backbone.fingerprint).split(clip_id)

    chunks = []
    for wi, (start, length) in enumerate(plan_windows(frames.shape[0], config.window, backbone.spec.w_max)):
        rng = noise_root.split(f"window{wi}") if config.noisy_extract else None
        chunks.append(extract_window(frames[start:start + length], config, backbone,
                                     schedule=schedule, rng=rng))
    features = np.concatenate(chunks, axis=0)
    provenance = {
        "config": config.canonical(),
        "backbone_fingerprint": backbone.fingerprint,
        "clip_id": clip_id,
    }
    fs = FeatureSequence(features=features, provenance=provenance)
    if cache is not None:
        cache.put(key, fs)
    return fs


def cache_key(config: ExtractionConfig, fingerprint: str, clip_id: str) -> str:
    """Stable 128-bit content key over the canonical serialization."""
    payload = json.dumps(
        {"config": config.canonical(), "fingerprint": fingerprint, "clip": clip_id},
        sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(payload, digest_size=16).hexdigest()


class FeatureCache:
    """One file per key under a two-level hex fan-out. Writers go through a
    temp file and atomic rename; readers verify a CRC32 trailer."""

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _paths(self, key: str) -> tuple:
        d = os.path.join(self.root, key[:2], key[2:4])
        return os.path.join(d, key + ".feat"), os.path.join(d, key + ".json")

    def put(self, key: str, fs: FeatureSequence) -> None:
        feat_path, meta_path = self._paths(key)
        os.makedirs(os.path.dirname(feat_path), exist_ok=True)
        blob = serialize.tensor_to_bytes(fs.features)
        blob += struct.pack("<I", zlib.crc32(blob))
        for path, data in ((feat_path, blob),
                           (meta_path, json.dumps(fs.provenance, sort_keys=True).encode())):
            fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    def get(self, key: str) -> FeatureSequence | None:
        feat_path, meta_path = self._paths(key)
        if not (os.path.exists(feat_path) and os.path.exists(meta_path)):
            self.misses += 1
            return None
        with open(feat_path, "rb") as f:
            blob = f.read()
        if len(blob) < 4:
            raise CacheCorruptionError(f"truncated cache file {feat_path}")
        payload, trailer = blob[:-4], struct.unpack("<I", blob[-4:])[0]
        if zlib.crc32(payload) != trailer:
            raise CacheCorruptionError(f"checksum mismatch in {feat_path}")
        features = serialize.tensor_from_bytes(payload)
        with open(meta_path) as f:
            provenance = json.load(f)
        self.hits += 1
        return FeatureSequence(features=features, provenance=provenance)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def reset_stats(self) -> None:
        self.hits = 0
        self.misses = 0

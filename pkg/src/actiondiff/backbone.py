"""Toy latent video-diffusion backbone.

Plays the role of a frozen pretrained video diffusion model at desk scale:
a fixed orthonormal patch encoder/decoder pair, a linear-beta noise
schedule, a condition encoder, and a two-level temporal U-Net denoiser whose
six blocks are tappable (indexed input to bottleneck). Every temporal
attention block is gated by a learned alpha in [0, 1]; alpha = 1 reproduces
per-frame (image model) behavior exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from . import serialize
from .layers import AdamW, Linear, MultiheadAttention, LayerNorm, conv3x3, conv_init, prefixed
from .numerics import Tensor
from .rng import Rng


class BackboneError(Exception):
    pass


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process; alpha_bars[t] = prod_{s<=t}(1 - beta_s)."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise BackboneError("alpha_bars must be strictly decreasing")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not (0.0 < beta_start < beta_end < 1.0):
        raise BackboneError(f"invalid beta bounds [{beta_start}, {beta_end}]")
    if T < 2:
        raise BackboneError("schedule needs T >= 2")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def diffuse(z0: np.ndarray, alpha_bar: float, eps: np.ndarray) -> np.ndarray:
    """Exact affine forward step: sqrt(ab) * z0 + sqrt(1 - ab) * eps."""
    if z0.shape != eps.shape:
        raise BackboneError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray | None = None,
              rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Apply the forward process at step t. Returns (z_t, eps); eps is drawn
    from `rng` when not supplied."""
    if not 0 <= t < schedule.T:
        raise BackboneError(f"t={t} out of range for T={schedule.T}")
    if eps is None:
        if rng is None:
            raise BackboneError("add_noise needs eps or an rng to draw it")
        eps = rng.normal(z0.shape)
    eps = np.asarray(eps, dtype=z0.dtype)
    return diffuse(z0, float(schedule.alpha_bars[t]), eps), eps


def generative_step_to_timestep(s: int, S: int, schedule: NoiseSchedule) -> int:
    """Map a generative (reverse-direction) step index to a schedule step.
    s = S is the cleanest step (t = 0); smaller s means more noise."""
    if not 1 <= s <= S:
        raise BackboneError(f"generative step {s} outside 1..{S}")
    return int(math.floor((schedule.T - 1) * (1.0 - s / S) + 0.5))


# ---------------------------------------------------------------------------
# Spec


@dataclass(frozen=True)
class BackboneSpec:
    frame_hw: int = 32
    frame_c: int = 1
    patch: int = 4
    latent_c: int = 4
    level_channels: tuple = (32, 64)
    num_layers: int = 6
    cond_dim: int = 32
    temb_dim: int = 64
    heads: int = 4
    w_max: int = 8
    alpha_init: float = 0.5

    @property
    def latent_hw(self) -> int:
        return self.frame_hw // self.patch

    def tap_shape(self, layer: int) -> tuple:
        """(h_l, w_l, c_l) of the tap after block `layer` (1-based,
        input-to-bottleneck order)."""
        if not 1 <= layer <= self.num_layers:
            raise BackboneError(f"layer {layer} outside 1..{self.num_layers}")
        hw = self.latent_hw
        if layer <= 2:
            return (hw, hw, self.level_channels[0])
        return (hw // 2, hw // 2, self.level_channels[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_channels"] = list(self.level_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "BackboneSpec":
        d = dict(d)
        d["level_channels"] = tuple(d["level_channels"])
        return BackboneSpec(**d)


# ---------------------------------------------------------------------------
# Denoiser blocks


class DenoiserBlock:
    """Residual spatial block with timestep injection, optional spatial
    self-attention, optional cross-attention to the condition tokens, and an
    alpha-gated temporal attention over the frame axis."""

    def __init__(self, rng: Rng, ch: int, temb_dim: int, cond_dim: int, heads: int,
                 self_attn: bool, cross_attn: bool, alpha_init: float):
        self.ln1 = LayerNorm(ch)
        self.conv1_w, self.conv1_b = conv_init(rng.split("conv1"), ch, ch)
        self.temb_proj = Linear(rng.split("temb"), temb_dim, ch)
        self.ln2 = LayerNorm(ch)
        self.conv2_w, self.conv2_b = conv_init(rng.split("conv2"), ch, ch)
        self.self_attn = None
        self.cross_attn = None
        if self_attn:
            self.ln_s = LayerNorm(ch)
            self.self_attn = MultiheadAttention(rng.split("sattn"), ch, heads)
        if cross_attn:
            self.ln_c = LayerNorm(ch)
            self.cross_attn = MultiheadAttention(rng.split("cattn"), ch, heads, kv_dim=cond_dim)
        self.ln_t = LayerNorm(ch)
        self.temporal = MultiheadAttention(rng.split("tattn"), ch, heads)
        self.alpha = Tensor(np.asarray(alpha_init), requires_grad=True)

    def __call__(self, x: Tensor, temb: Tensor, cond: Tensor) -> Tensor:
        b, m, hh, ww, c = x.shape
        r = x
        h = conv3x3(nm.silu(self.ln1(x)), self.conv1_w, self.conv1_b)
        te = self.temb_proj(nm.silu(temb))
        te = nm.broadcast_to(nm.reshape(te, (b, 1, 1, 1, c)), (b, m, hh, ww, c))
        h = h + te
        h = conv3x3(nm.silu(self.ln2(h)), self.conv2_w, self.conv2_b)
        x = r + h

        if self.self_attn is not None:
            t = nm.reshape(x, (b * m, hh * ww, c))
            t = self.self_attn(self.ln_s(t))
            x = x + nm.reshape(t, (b, m, hh, ww, c))

        if self.cross_attn is not None:
            q = nm.reshape(x, (b, m * hh * ww, c))
            o = self.cross_attn(self.ln_c(q), kv=cond)
            x = x + nm.reshape(o, (b, m, hh, ww, c))

        # temporal path, mixed as alpha * spatial + (1 - alpha) * temporal
        t = nm.reshape(x, (b, m, hh * ww, c))
        t = nm.transpose(t, (0, 2, 1, 3))
        t = nm.reshape(t, (b * hh * ww, m, c))
        o = self.temporal(self.ln_t(t))
        o = nm.reshape(o, (b, hh * ww, m, c))
        o = nm.transpose(o, (0, 2, 1, 3))
        o = nm.reshape(o, (b, m, hh, ww, c))
        return x + o * (1.0 - self.alpha)

    def params(self) -> dict:
        out = {
            "ln1.g": self.ln1.g, "ln1.b": self.ln1.b,
            "conv1.w": self.conv1_w, "conv1.b": self.conv1_b,
            "ln2.g": self.ln2.g, "ln2.b": self.ln2.b,
            "conv2.w": self.conv2_w, "conv2.b": self.conv2_b,
            "ln_t.g": self.ln_t.g, "ln_t.b": self.ln_t.b,
            "alpha": self.alpha,
        }
        out.update(prefixed("temb", self.temb_proj.params()))
        out.update(prefixed("tattn", self.temporal.params()))
        if self.self_attn is not None:
            out.update({"ln_s.g": self.ln_s.g, "ln_s.b": self.ln_s.b})
            out.update(prefixed("sattn", self.self_attn.params()))
        if self.cross_attn is not None:
            out.update({"ln_c.g": self.ln_c.g, "ln_c.b": self.ln_c.b})
            out.update(prefixed("cattn", self.cross_attn.params()))
        return out


class DecoderBlock:
    """Residual block on the upsampling path (no attention, not tappable)."""

    def __init__(self, rng: Rng, c_in: int, c_out: int, temb_dim: int):
        self.ln1 = LayerNorm(c_in)
        self.conv1_w, self.conv1_b = conv_init(rng.split("conv1"), c_in, c_out)
        self.temb_proj = Linear(rng.split("temb"), temb_dim, c_out)
        self.ln2 = LayerNorm(c_out)
        self.conv2_w, self.conv2_b = conv_init(rng.split("conv2"), c_out, c_out)
        self.skip = Linear(rng.split("skip"), c_in, c_out)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        b, m, hh, ww, _ = x.shape
        c = self.conv1_b.shape[0]
        r = self.skip(x)
        h = conv3x3(nm.silu(self.ln1(x)), self.conv1_w, self.conv1_b)
        te = self.temb_proj(nm.silu(temb))
        te = nm.broadcast_to(nm.reshape(te, (b, 1, 1, 1, c)), (b, m, hh, ww, c))
        h = h + te
        h = conv3x3(nm.silu(self.ln2(h)), self.conv2_w, self.conv2_b)
        return r + h

    def params(self) -> dict:
        out = {
            "ln1.g": self.ln1.g, "ln1.b": self.ln1.b,
            "conv1.w": self.conv1_w, "conv1.b": self.conv1_b,
            "ln2.g": self.ln2.g, "ln2.b": self.ln2.b,
            "conv2.w": self.conv2_w, "conv2.b": self.conv2_b,
        }
        out.update(prefixed("temb", self.temb_proj.params()))
        out.update(prefixed("skip", self.skip.params()))
        return out


def action_text_embedding(name: str, dim: int) -> np.ndarray:
    """Seeded hash embedding of an action name; stable across backbones."""
    return Rng(f"action-text:{name}").normal((dim,), scale=1.0 / math.sqrt(dim))


# ---------------------------------------------------------------------------
# Backbone


class Backbone:
    """Frozen-encoder latent diffusion model with a tappable denoiser.

    The frame encoder is a fixed seeded orthonormal patch projection and
    receives no gradient ever. Denoiser and condition-encoder weights may be
    trained by :func:`pretrain_backbone`.
    """

    COND_MODES = ("frame", "action_text", "none")

    def __init__(self, spec: BackboneSpec = BackboneSpec(), rng: Rng | None = None):
        rng = rng if rng is not None else Rng(0)
        self.spec = spec
        p = spec.patch * spec.patch * spec.frame_c

        q = rng.split("encoder").normal((p, spec.latent_c))
        q, r = np.linalg.qr(q)
        signs = np.where(np.diag(r) >= 0, 1.0, -1.0)
        self.encoder_q = (q * signs).astype(np.float64)

        c1, c2 = spec.level_channels
        self.stem = Linear(rng.split("stem"), spec.latent_c, c1)
        self.temb_fc1 = Linear(rng.split("temb1"), spec.temb_dim, spec.temb_dim)
        self.temb_fc2 = Linear(rng.split("temb2"), spec.temb_dim, spec.temb_dim)

        def blk(i, ch, sa, ca):
            return DenoiserBlock(rng.split(f"block{i}"), ch, spec.temb_dim,
                                 spec.cond_dim, spec.heads, sa, ca, spec.alpha_init)

        # cross-attention once per level (blocks 1, 3, 5); self-attention on
        # the deep level only
        self.blocks = [
            blk(1, c1, False, True),
            blk(2, c1, False, False),
            blk(3, c2, True, True),
            blk(4, c2, True, False),
            blk(5, c2, True, True),
            blk(6, c2, True, False),
        ]
        self.down = Linear(rng.split("down"), c1, c2)
        self.dec2 = DecoderBlock(rng.split("dec2"), 2 * c2, c2, spec.temb_dim)
        self.dec1 = DecoderBlock(rng.split("dec1"), c2 + c1, c1, spec.temb_dim)
        self.out_ln = LayerNorm(c1)
        self.out = Linear(rng.split("out"), c1, spec.latent_c, zero=True)

        self.cond_patch = Linear(rng.split("cond_patch"), p, spec.cond_dim)
        self.cond_out = Linear(rng.split("cond_out"), spec.cond_dim, spec.cond_dim)

        self.frame_cond_calls = 0  # instrumentation for conditioning ablations
        self._fingerprint: str | None = None

    # -- parameters ---------------------------------------------------------

    def trainable_params(self) -> dict:
        out = {}
        out.update(prefixed("stem", self.stem.params()))
        out.update(prefixed("temb1", self.temb_fc1.params()))
        out.update(prefixed("temb2", self.temb_fc2.params()))
        for i, b in enumerate(self.blocks, start=1):
            out.update(prefixed(f"block{i}", b.params()))
        out.update(prefixed("down", self.down.params()))
        out.update(prefixed("dec2", self.dec2.params()))
        out.update(prefixed("dec1", self.dec1.params()))
        out.update({"out_ln.g": self.out_ln.g, "out_ln.b": self.out_ln.b})
        out.update(prefixed("out", self.out.params()))
        out.update(prefixed("cond_patch", self.cond_patch.params()))
        out.update(prefixed("cond_out", self.cond_out.params()))
        return out

    def all_weights(self) -> dict:
        w = {k: p.data for k, p in self.trainable_params().items()}
        w["encoder.q"] = self.encoder_q
        return w

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = serialize.fingerprint(self.spec.to_dict(), self.all_weights())
        return self._fingerprint

    def _invalidate(self) -> None:
        self._fingerprint = None

    # -- frozen frame encoder / decoder --------------------------------------

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        s, pch = self.spec, self.spec.patch
        n = s.latent_hw
        t = frames.reshape(-1, n, pch, n, pch, s.frame_c)
        return t.transpose(0, 1, 3, 2, 4, 5).reshape(-1, n, n, pch * pch * s.frame_c)

    def _unpatchify(self, patches: np.ndarray) -> np.ndarray:
        s, pch = self.spec, self.spec.patch
        n = s.latent_hw
        t = patches.reshape(-1, n, n, pch, pch, s.frame_c)
        return t.transpose(0, 1, 3, 2, 4, 5).reshape(-1, s.frame_hw, s.frame_hw, s.frame_c)

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame frozen encoding; no temporal mixing, no gradients."""
        s = self.spec
        frames = np.asarray(frames)
        if frames.shape[1:] != (s.frame_hw, s.frame_hw, s.frame_c):
            raise BackboneError(f"frame extents {frames.shape[1:]} do not match spec")
        patches = self._patchify(frames.astype(np.float64)) - 0.5
        z = patches @ self.encoder_q
        return z.astype(nm.default_dtype())

    def decode_latents(self, latents: np.ndarray) -> np.ndarray:
        s = self.spec
        latents = np.asarray(latents)
        if latents.shape[1:] != (s.latent_hw, s.latent_hw, s.latent_c):
            raise BackboneError(f"latent extents {latents.shape[1:]} do not match spec")
        patches = latents.astype(np.float64) @ self.encoder_q.T + 0.5
        return self._unpatchify(patches).astype(nm.default_dtype())

    # -- condition encoder ----------------------------------------------------

    def encode_condition(self, mode: str, payload=None) -> Tensor:
        s = self.spec
        if mode == "none":
            return Tensor(np.zeros((1, s.cond_dim)))
        if mode == "action_text":
            if not payload:
                raise BackboneError("action_text conditioning needs action names")
            vecs = [action_text_embedding(name, s.cond_dim) for name in payload]
            return Tensor(np.mean(vecs, axis=0, keepdims=True))
        if mode == "frame":
            if payload is None:
                raise BackboneError("frame conditioning needs the middle frame")
            self.frame_cond_calls += 1
            frame = np.asarray(payload).reshape(1, s.frame_hw, s.frame_hw, s.frame_c)
            patches = self._patchify(frame.astype(np.float64))[0] - 0.5
            n = s.latent_hw
            x = Tensor(patches.reshape(n * n, -1))
            h = nm.gelu(self.cond_patch(x))
            h = nm.reshape(h, (2, n // 2, 2, n // 2, s.cond_dim))
            h = nm.mean(h, axis=(1, 3))
            h = nm.reshape(h, (4, s.cond_dim))
            return self.cond_out(h)
        raise BackboneError(f"unknown conditioning mode {mode!r}")

    # -- denoiser -------------------------------------------------------------

    def _temb(self, ts) -> Tensor:
        sin = nm.sinusoidal_encoding(np.asarray(ts, dtype=np.int64), self.spec.temb_dim)
        return self.temb_fc2(nm.silu(self.temb_fc1(sin)))

    def _forward_batch(self, z: Tensor, ts, cond: Tensor, tap: int | None):
        s = self.spec
        b, m = z.shape[0], z.shape[1]
        if m > s.w_max:
            raise BackboneError(f"window of {m} frames exceeds w_max={s.w_max}")
        if tap is not None and not 1 <= tap <= s.num_layers:
            raise BackboneError(f"tap layer {tap} outside 1..{s.num_layers}")
        if cond.ndim == 2:
            cond = nm.broadcast_to(nm.reshape(cond, (1,) + cond.shape), (b,) + cond.shape)

        temb = self._temb(ts)
        taps = {}
        h = self.stem(z)
        h = self.blocks[0](h, temb, cond)
        taps[1] = h
        h = self.blocks[1](h, temb, cond)
        taps[2] = h
        skip1 = h

        n = s.latent_hw
        h = nm.reshape(h, (b, m, n // 2, 2, n // 2, 2, s.level_channels[0]))
        h = nm.mean(h, axis=(3, 5))
        h = self.down(h)

        h = self.blocks[2](h, temb, cond)
        taps[3] = h
        h = self.blocks[3](h, temb, cond)
        taps[4] = h
        skip2 = h
        h = self.blocks[4](h, temb, cond)
        taps[5] = h
        h = self.blocks[5](h, temb, cond)
        taps[6] = h

        h = self.dec2(nm.concat([h, skip2], axis=-1), temb)
        k = n // 2
        h = nm.reshape(h, (b, m, k, 1, k, 1, s.level_channels[1]))
        h = nm.broadcast_to(h, (b, m, k, 2, k, 2, s.level_channels[1]))
        h = nm.reshape(h, (b, m, n, n, s.level_channels[1]))
        h = self.dec1(nm.concat([h, skip1], axis=-1), temb)
        eps = self.out(nm.silu(self.out_ln(h)))
        return eps, (taps[tap] if tap is not None else None)

    def denoise_forward(self, latents, t: int, cond: Tensor | None = None,
                        tap: int | None = None):
        """One denoising pass over a window of M frames. Returns (eps_pred,
        tapped activation or None), both without the batch axis."""
        z = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents))
        if z.ndim != 4:
            raise BackboneError(f"latents must be (M, h, w, c), got {z.shape}")
        s = self.spec
        if z.shape[1:] != (s.latent_hw, s.latent_hw, s.latent_c):
            raise BackboneError(f"latent extents {z.shape[1:]} do not match spec")
        if cond is None:
            cond = self.encode_condition("none")
        zb = nm.reshape(z, (1,) + z.shape)
        eps, tapped = self._forward_batch(zb, [t], cond, tap)
        eps = nm.reshape(eps, eps.shape[1:])
        if tapped is not None:
            tapped = nm.reshape(tapped, tapped.shape[1:])
        return eps, tapped

    # -- modes / copies -------------------------------------------------------

    def clone(self) -> "Backbone":
        twin = Backbone(self.spec, Rng(0))
        mine = self.trainable_params()
        for name, p in twin.trainable_params().items():
            p.assign_(mine[name].data.copy())
        twin.encoder_q = self.encoder_q.copy()
        twin._invalidate()
        return twin

    def set_image_mode(self) -> "Backbone":
        """Copy of this backbone with every temporal gate at exactly 1.0."""
        twin = self.clone()
        for blk in twin.blocks:
            blk.alpha.assign_(np.asarray(1.0))
        twin._invalidate()
        return twin

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        header = {"kind": "backbone", "spec": self.spec.to_dict(),
                  "fingerprint": self.fingerprint}
        serialize.save_checkpoint(path, header, self.all_weights())

    @staticmethod
    def load(path) -> "Backbone":
        header, weights = serialize.load_checkpoint(path)
        if header.get("kind") != "backbone":
            raise BackboneError(f"not a backbone checkpoint: {path}")
        bb = Backbone(BackboneSpec.from_dict(header["spec"]), Rng(0))
        for name, p in bb.trainable_params().items():
            p.assign_(weights[name])
        bb.encoder_q = weights["encoder.q"].astype(np.float64)
        bb._invalidate()
        return bb


# ---------------------------------------------------------------------------
# Pretraining (noise-prediction objective)


def pretrain_backbone(backbone: Backbone, clips, schedule: NoiseSchedule, steps: int,
                      lr: float = 3e-4, rng: Rng | None = None, batch: int = 4,
                      log_every: int = 50) -> list:
    """Train denoiser + condition encoder to predict the injected noise from
    noised latents, uniformly sampled timesteps and middle-frame conditioning.
    The frame encoder stays frozen. Returns [(step, loss), ...] per step."""
    if steps == 0:
        return []
    if not clips:
        raise BackboneError("pretraining corpus is empty")
    rng = rng if rng is not None else Rng("pretrain")
    s = backbone.spec

    frames_of = [np.asarray(c.frames if hasattr(c, "frames") else c) for c in clips]
    latents = [backbone.encode_frames(f) for f in frames_of]
    encoder_before = backbone.encoder_q.copy()

    opt = AdamW(backbone.trainable_params())
    draw = rng.split("draws")
    log = []
    for step in range(steps):
        zs, conds, ts = [], [], []
        for b in range(batch):
            ci = int(draw.integers(0, len(latents)))
            z0 = latents[ci]
            m = min(s.w_max, z0.shape[0])
            start = int(draw.integers(0, z0.shape[0] - m + 1))
            t = int(draw.integers(0, schedule.T))
            eps = draw.normal((m,) + z0.shape[1:]).astype(z0.dtype)
            zt, _ = add_noise(schedule, z0[start:start + m], t, eps)
            zs.append((zt, eps))
            ts.append(t)
            mid = frames_of[ci][start + m // 2]
            conds.append(backbone.encode_condition("frame", mid))

        z_in = Tensor(np.stack([z for z, _ in zs]))
        target = Tensor(np.stack([e for _, e in zs]))
        cond = nm.concat([nm.reshape(c, (1,) + c.shape) for c in conds], axis=0)
        try:
            pred, _ = backbone._forward_batch(z_in, ts, cond, tap=None)
            diff = pred - target
            loss = (diff * diff).mean()
            loss.backward()
        except nm.NonFiniteError as e:
            raise nm.NonFiniteError(f"pretraining diverged at step {step}: {e}") from e

        value = loss.item()
        opt.step(lr)
        opt.zero_grad()
        for blk in backbone.blocks:
            a = float(blk.alpha.data)
            if a < 0.0 or a > 1.0:
                blk.alpha.assign_(np.asarray(min(max(a, 0.0), 1.0)))
        log.append((step, value))
        if log_every and step % log_every == 0:
            pass  # hook point; CLI prints from the returned log

    if not np.array_equal(encoder_before, backbone.encoder_q):
        raise BackboneError("frozen encoder was modified during pretraining")
    backbone._invalidate()
    return log

"""Procedural synthetic video corpus with controllable domain axes.

Clips are 32x32 grayscale renders of one (or two) anti-aliased sprites over
a background. Three independent axes define the domain of a clip: species
(sprite shape), viewpoint (sprite scale + camera jitter), and context
(background family). Every clip is a pure function of its SceneSpec, so the
corpus never needs to be stored to be reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng

ACTIONS = ("oscillate", "pulse", "rotate", "still", "translate")
SPECIES = ("circle", "cross", "square", "star", "triangle")
VIEWPOINTS = ("third_person", "ego")
CONTEXTS = ("plain", "textured", "gradient")

SIZE = 32


class DatagenError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    action: str
    species: str
    viewpoint: str
    context: str
    frames: int
    seed: int
    second: tuple | None = None  # (species, action, subseed) for two-sprite clips

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise DatagenError(f"unknown action {self.action!r}")
        if self.species not in SPECIES:
            raise DatagenError(f"unknown species {self.species!r}")
        if self.viewpoint not in VIEWPOINTS:
            raise DatagenError(f"unknown viewpoint {self.viewpoint!r}")
        if self.context not in CONTEXTS:
            raise DatagenError(f"unknown context {self.context!r}")
        if not 8 <= self.frames <= 64:
            raise DatagenError(f"frames={self.frames} outside [8, 64]")
        if self.second is not None:
            sp, ac, _ = self.second
            if sp not in SPECIES or ac not in ACTIONS:
                raise DatagenError(f"invalid second sprite {self.second!r}")

    def to_dict(self) -> dict:
        return {
            "action": self.action, "species": self.species,
            "viewpoint": self.viewpoint, "context": self.context,
            "frames": self.frames, "seed": self.seed,
            "second": list(self.second) if self.second else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        second = tuple(d["second"]) if d.get("second") else None
        return SceneSpec(action=d["action"], species=d["species"],
                         viewpoint=d["viewpoint"], context=d["context"],
                         frames=d["frames"], seed=d["seed"], second=second)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, 32, 32, 1) float32 in [0, 1]
    clip_id: str
    labels: list
    species: str
    viewpoint: str
    context: str


# ---------------------------------------------------------------------------
# Rasterization

_YY, _XX = np.meshgrid(np.arange(SIZE) + 0.5, np.arange(SIZE) + 0.5, indexing="ij")


def _box_sdf(px, py, hx, hy):
    qx = np.abs(px) - hx
    qy = np.abs(py) - hy
    outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2)
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def _polygon_sdf(px, py, verts):
    d = np.full(px.shape, np.inf)
    sign = np.ones(px.shape)
    n = len(verts)
    j = n - 1
    for i in range(n):
        vix, viy = verts[i]
        vjx, vjy = verts[j]
        ex, ey = vjx - vix, vjy - viy
        wx, wy = px - vix, py - viy
        t = np.clip((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        bx, by = wx - ex * t, wy - ey * t
        d = np.minimum(d, bx * bx + by * by)
        c1 = py >= viy
        c2 = py < vjy
        c3 = ex * wy > ey * wx
        flip = (c1 & c2 & c3) | (~c1 & ~c2 & ~c3)
        sign = np.where(flip, -sign, sign)
        j = i
    return sign * np.sqrt(d)


def _rot(px, py, theta):
    c, s = math.cos(theta), math.sin(theta)
    return c * px + s * py, -s * px + c * py


def _sprite_sdf(species: str, px, py, radius: float, theta: float):
    if species == "circle":
        return np.sqrt(px * px + py * py) - radius
    if species == "square":
        u, v = _rot(px, py, theta)
        a = radius * 0.88
        return _box_sdf(u, v, a, a)
    if species == "cross":
        u, v = _rot(px, py, theta)
        a = radius * 1.05
        return np.minimum(_box_sdf(u, v, a, 0.38 * a), _box_sdf(u, v, 0.38 * a, a))
    if species == "triangle":
        r = radius * 1.25
        angles = [theta + math.radians(90 + 120 * k) for k in range(3)]
        verts = [(r * math.cos(a), r * math.sin(a)) for a in angles]
        return _polygon_sdf(px, py, verts)
    if species == "star":
        verts = []
        for k in range(10):
            r = radius * (1.3 if k % 2 == 0 else 0.55)
            a = theta + math.radians(-90 + 36 * k)
            verts.append((r * math.cos(a), r * math.sin(a)))
        return _polygon_sdf(px, py, verts)
    raise DatagenError(f"unknown species {species!r}")


def _coverage(sdf):
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _bilinear_grid(grid, xx, yy):
    """Sample a coarse (n, n) grid bilinearly at wrapped pixel coordinates."""
    n = grid.shape[0]
    scale = n / SIZE
    gx = (xx * scale - 0.5) % n
    gy = (yy * scale - 0.5) % n
    x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
    fx, fy = gx - x0, gy - y0
    x1, y1 = (x0 + 1) % n, (y0 + 1) % n
    return (grid[y0, x0] * (1 - fx) * (1 - fy) + grid[y0, x1] * fx * (1 - fy)
            + grid[y1, x0] * (1 - fx) * fy + grid[y1, x1] * fx * fy)


# ---------------------------------------------------------------------------
# Motion models


def _sprite_track(rng: Rng, action: str, viewpoint: str, frames: int):
    """Per-frame (cx, cy, radius, theta) for one sprite."""
    if viewpoint == "third_person":
        radius = float(rng.uniform(3.5, 5.0))
    else:
        radius = float(rng.uniform(7.0, 9.5))
    margin = radius + 2.5
    theta0 = float(rng.uniform(0.0, 2 * math.pi))
    t = np.arange(frames, dtype=np.float64)

    cx = np.full(frames, 0.0)
    cy = np.full(frames, 0.0)
    rr = np.full(frames, radius)
    th = np.full(frames, theta0)

    if action == "translate":
        speed = float(rng.uniform(0.55, 1.1))
        ang = float(rng.uniform(0.0, 2 * math.pi))
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        span_x, span_y = vx * (frames - 1), vy * (frames - 1)
        x0 = float(rng.uniform(margin + max(-span_x, 0), SIZE - margin - max(span_x, 0)))
        y0 = float(rng.uniform(margin + max(-span_y, 0), SIZE - margin - max(span_y, 0)))
        cx, cy = x0 + vx * t, y0 + vy * t
    elif action == "oscillate":
        amp = float(rng.uniform(2.5, 4.5))
        cycles = float(rng.uniform(1.0, 2.0))
        phase = float(rng.uniform(0.0, 2 * math.pi))
        ang = float(rng.uniform(0.0, 2 * math.pi))
        ax, ay = math.cos(ang), math.sin(ang)
        x0 = float(rng.uniform(margin + amp, SIZE - margin - amp))
        y0 = float(rng.uniform(margin + amp, SIZE - margin - amp))
        osc = amp * np.sin(2 * math.pi * cycles * t / max(frames - 1, 1) + phase)
        cx, cy = x0 + ax * osc, y0 + ay * osc
    elif action == "pulse":
        depth = float(rng.uniform(0.35, 0.5))
        cycles = float(rng.uniform(1.0, 2.0))
        phase = float(rng.uniform(0.0, 2 * math.pi))
        x0 = float(rng.uniform(margin * 1.3, SIZE - margin * 1.3))
        y0 = float(rng.uniform(margin * 1.3, SIZE - margin * 1.3))
        cx[:], cy[:] = x0, y0
        area = 1.0 + depth * np.sin(2 * math.pi * cycles * t / max(frames - 1, 1) + phase)
        rr = radius * np.sqrt(area)
    elif action == "rotate":
        rate = math.radians(float(rng.uniform(9.0, 20.0)))
        if rng.uniform() < 0.5:
            rate = -rate
        x0 = float(rng.uniform(margin, SIZE - margin))
        y0 = float(rng.uniform(margin, SIZE - margin))
        cx[:], cy[:] = x0, y0
        th = theta0 + rate * t
    else:  # still
        x0 = float(rng.uniform(margin, SIZE - margin))
        y0 = float(rng.uniform(margin, SIZE - margin))
        cx[:], cy[:] = x0, y0

    if viewpoint == "ego":
        # bias the sprite off-center
        cx = np.clip(cx + (4.0 if cx.mean() > SIZE / 2 else -4.0), margin, SIZE - margin)
        cy = np.clip(cy + (2.5 if cy.mean() > SIZE / 2 else -2.5), margin, SIZE - margin)
    return cx, cy, rr, th


def render_clip(spec: SceneSpec, clip_id: str = "clip") -> VideoClip:
    """Deterministic render of a SceneSpec; same spec gives identical bytes."""
    root = Rng(f"scene:{spec.seed}")
    bg_rng = root.split("bg")
    s1 = root.split("sprite0")

    if spec.context == "plain":
        level = float(bg_rng.uniform(0.05, 0.28))
        bg_fn = lambda jx, jy: np.full((SIZE, SIZE), level)
    elif spec.context == "textured":
        grid = bg_rng.uniform(0.0, 0.40, (8, 8))
        bg_fn = lambda jx, jy: _bilinear_grid(grid, _XX + jx, _YY + jy)
    else:  # gradient
        phi = float(bg_rng.uniform(0.0, 2 * math.pi))
        base = float(bg_rng.uniform(0.08, 0.20))
        gain = float(bg_rng.uniform(0.12, 0.25))
        gx, gy = math.cos(phi), math.sin(phi)
        bg_fn = lambda jx, jy: np.clip(
            base + gain * ((_XX + jx - SIZE / 2) * gx + (_YY + jy - SIZE / 2) * gy) / (SIZE / 2),
            0.0, 0.45)

    if spec.viewpoint == "ego":
        jitter = root.split("jitter").normal((spec.frames, 2), scale=0.8)
    else:
        jitter = np.zeros((spec.frames, 2))

    sprites = [(spec.species, _sprite_track(s1, spec.action, spec.viewpoint, spec.frames),
                float(s1.uniform(0.82, 1.0)))]
    if spec.second is not None:
        sp2, ac2, sub = spec.second
        s2 = Rng(f"scene:{spec.seed}:second:{sub}")
        sprites.append((sp2, _sprite_track(s2, ac2, spec.viewpoint, spec.frames),
                        float(s2.uniform(0.82, 1.0))))

    frames = np.empty((spec.frames, SIZE, SIZE, 1), dtype=np.float32)
    for f in range(spec.frames):
        jx, jy = jitter[f]
        img = bg_fn(jx, jy)
        for species, (cx, cy, rr, th), intensity in sprites:
            sdf = _sprite_sdf(species, _XX - (cx[f] + jx), _YY - (cy[f] + jy),
                              float(rr[f]), float(th[f]))
            cov = _coverage(sdf)
            img = img * (1.0 - cov) + intensity * cov
        frames[f, :, :, 0] = np.clip(img, 0.0, 1.0)

    labels = sorted({spec.action} | ({spec.second[1]} if spec.second else set()))
    return VideoClip(frames=frames, clip_id=clip_id, labels=labels,
                     species=spec.species, viewpoint=spec.viewpoint, context=spec.context)


# ---------------------------------------------------------------------------
# Manifests and protocols


@dataclass
class ManifestEntry:
    clip_id: str
    spec: SceneSpec
    labels: list
    split: str


@dataclass
class DatasetManifest:
    entries: list
    task_mode: str
    classes: list
    protocol: str
    seed: int
    meta: dict = field(default_factory=dict)

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def render(self, entry: ManifestEntry) -> VideoClip:
        clip = render_clip(entry.spec, clip_id=entry.clip_id)
        clip.labels = list(entry.labels)
        return clip

    def label_vector(self, entry: ManifestEntry) -> np.ndarray:
        vec = np.zeros(len(self.classes), dtype=np.float32)
        for name in entry.labels:
            vec[self.classes.index(name)] = 1.0
        return vec

    def class_counts(self, split: str) -> dict:
        counts: dict = {}
        for e in self.split_entries(split):
            for name in e.labels:
                counts[name] = counts.get(name, 0) + 1
        return counts

    def domain_counts(self, split: str, axis: str) -> dict:
        counts: dict = {}
        for e in self.split_entries(split):
            key = getattr(e.spec, axis)
            sub = counts.setdefault(key, {})
            for name in e.labels:
                sub[name] = sub.get(name, 0) + 1
        return counts

    def to_json(self) -> str:
        return json.dumps({
            "task_mode": self.task_mode,
            "classes": self.classes,
            "protocol": self.protocol,
            "seed": self.seed,
            "meta": self.meta,
            "entries": [
                {"clip_id": e.clip_id, "spec": e.spec.to_dict(),
                 "labels": e.labels, "split": e.split}
                for e in self.entries
            ],
        }, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        d = json.loads(text)
        entries = [ManifestEntry(clip_id=e["clip_id"], spec=SceneSpec.from_dict(e["spec"]),
                                 labels=list(e["labels"]), split=e["split"])
                   for e in d["entries"]]
        ids = [e.clip_id for e in entries]
        if len(set(ids)) != len(ids):
            raise DatagenError("duplicate clip ids in manifest")
        return DatasetManifest(entries=entries, task_mode=d["task_mode"],
                               classes=list(d["classes"]), protocol=d["protocol"],
                               seed=d["seed"], meta=dict(d.get("meta", {})))


PROTOCOLS = ("cross_species", "cross_view", "cross_context", "in_domain")

_DEFAULT_SPLITS = {
    "cross_species": {
        "train": {"species": ("circle", "square", "cross")},
        "test": {"species": ("triangle", "star")},
    },
    "cross_view": {
        "train": {"viewpoints": ("third_person",)},
        "test": {"viewpoints": ("ego",)},
    },
    "cross_context": {
        "train": {"contexts": ("plain", "textured")},
        "test": {"contexts": ("gradient",)},
    },
    "in_domain": {"train": {}, "test": {}},
}


def _action_profiles(species_pool, imbalance: str, rng: Rng) -> dict:
    """Per-species distribution over actions. `skewed` draws one Dirichlet
    profile per species so cross-species frequency correlations vary."""
    profiles = {}
    for sp in species_pool:
        if imbalance == "uniform":
            profiles[sp] = np.full(len(ACTIONS), 1.0 / len(ACTIONS))
        elif imbalance == "skewed":
            profiles[sp] = rng.split(f"profile/{sp}").dirichlet([0.9] * len(ACTIONS))
        else:
            raise DatagenError(f"unknown imbalance profile {imbalance!r}")
    return profiles


def make_protocol(name: str, n_train: int, n_test: int, imbalance: str = "uniform",
                  seed: int = 0, frames: int = 16, viewpoints=None, contexts=None,
                  train_species=None, test_species=None) -> DatasetManifest:
    """Build train/test manifests for one domain-shift protocol. Domain pools
    not owned by the protocol default to: all species, third-person only,
    all contexts."""
    if name not in PROTOCOLS:
        raise DatagenError(f"unknown protocol {name!r}")
    if n_train < 1 or n_test < 1:
        raise DatagenError("need at least one clip per split")
    rng = Rng(f"protocol:{name}:{seed}")
    rules = _DEFAULT_SPLITS[name]

    pools = {}
    for split in ("train", "test"):
        sp = rules[split].get("species", SPECIES)
        if name == "cross_species":
            if split == "train" and train_species:
                sp = tuple(train_species)
            if split == "test" and test_species:
                sp = tuple(test_species)
        vp = rules[split].get("viewpoints")
        if vp is None:
            vp = tuple(viewpoints) if viewpoints else ("third_person",)
        cx = rules[split].get("contexts")
        if cx is None:
            cx = tuple(contexts) if contexts else CONTEXTS
        pools[split] = {"species": tuple(sp), "viewpoints": tuple(vp), "contexts": tuple(cx)}

    if name == "cross_species":
        overlap = set(pools["train"]["species"]) & set(pools["test"]["species"])
        if overlap:
            raise DatagenError(f"cross_species split shares species {sorted(overlap)}")
        if not pools["train"]["species"] or not pools["test"]["species"]:
            raise DatagenError("cross_species needs non-empty species pools on both sides")
    if name == "cross_context":
        overlap = set(pools["train"]["contexts"]) & set(pools["test"]["contexts"])
        if overlap:
            raise DatagenError(f"cross_context split shares contexts {sorted(overlap)}")

    profiles = _action_profiles(SPECIES, imbalance, rng.split("imbalance"))
    entries = []
    for split, count in (("train", n_train), ("test", n_test)):
        pick = rng.split(f"sample/{split}")
        pool = pools[split]
        for i in range(count):
            species = pick.choice(pool["species"])
            action = pick.choice(ACTIONS, p=profiles[species])
            viewpoint = pick.choice(pool["viewpoints"])
            context = pick.choice(pool["contexts"])
            clip_seed = int(pick.integers(0, 2**31 - 1))
            spec = SceneSpec(action=action, species=species, viewpoint=viewpoint,
                             context=context, frames=frames, seed=clip_seed)
            entries.append(ManifestEntry(clip_id=f"{split}_{i:05d}", spec=spec,
                                         labels=[action], split=split))

    meta = {
        "pools": {k: {kk: list(vv) for kk, vv in v.items()} for k, v in pools.items()},
        "imbalance": imbalance,
        "profiles": {sp: profiles[sp].tolist() for sp in profiles},
        "frames": frames,
    }
    return DatasetManifest(entries=entries, task_mode="single_label",
                           classes=sorted(ACTIONS), protocol=name, seed=seed, meta=meta)


def multi_label_variant(manifest: DatasetManifest, pair_rate: float, seed: int = 0) -> DatasetManifest:
    """Give a fraction of clips a second sprite with an independent action;
    labels become the union. pair_rate = 0 returns an unchanged copy."""
    if not 0.0 <= pair_rate <= 1.0:
        raise DatagenError(f"pair rate {pair_rate} outside [0, 1]")
    rng = Rng(f"multilabel:{manifest.seed}:{seed}")
    pools = manifest.meta.get("pools", {})
    entries = []
    for e in manifest.entries:
        spec = e.spec
        labels = list(e.labels)
        if pair_rate > 0 and rng.uniform() < pair_rate:
            pool = pools.get(e.split, {}).get("species")
            species2 = rng.choice(tuple(pool) if pool else SPECIES)
            action2 = rng.choice(ACTIONS)
            spec = replace(spec, second=(species2, action2, int(rng.integers(0, 2**31 - 1))))
            labels = sorted(set(labels) | {action2})
        entries.append(ManifestEntry(clip_id=e.clip_id, spec=spec, labels=labels, split=e.split))
    return DatasetManifest(entries=entries, task_mode="multi_label" if pair_rate > 0 else manifest.task_mode,
                           classes=list(manifest.classes), protocol=manifest.protocol,
                           seed=manifest.seed, meta=dict(manifest.meta))

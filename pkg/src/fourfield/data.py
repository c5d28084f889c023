"""Procedural video corpora and real-pair sampling.

Layout on disk::

    corpus/manifest.txt          key=value lines
    corpus/clip_00042/meta.txt   generator parameters for that clip
    corpus/clip_00042/frame_00.ppm ...

Frame ``i`` of an ``F``-frame clip sits at time ``i / (F - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discriminators import FramePair
from .imageio import quantize, read_ppm, write_ppm

KINDS = ("blink", "bounce", "orbit")
FORMAT = "fourfield-corpus-1"


class CorpusError(ValueError):
    pass


def frame_times(frames: int) -> np.ndarray:
    return np.arange(frames) / (frames - 1)


# ---------------------------------------------------------------- generators

def blink_params(rng: np.random.Generator) -> dict:
    offsets = rng.uniform(-0.1, 0.1, 3)
    offsets -= offsets.mean()
    peak = np.abs(offsets).max()
    if peak > 0.1:
        offsets *= 0.1 / peak
    return {"base": rng.uniform(0.35, 0.65), "amp": rng.uniform(0.1, 0.25),
            "phase": rng.uniform(0, 2 * np.pi), "offsets": offsets}


def blink_brightness(p: dict, t) -> np.ndarray:
    return p["base"] + p["amp"] * np.sin(2 * np.pi * np.asarray(t) + p["phase"])


def render_blink(p: dict, times: np.ndarray, h: int, w: int) -> np.ndarray:
    level = blink_brightness(p, times)[:, None] + p["offsets"][None, :]
    return np.broadcast_to(level[:, None, None, :], (len(times), h, w, 3)).copy()


def fold(x, lo: float, hi: float):
    """Reflect ``x`` into [lo, hi] as a point bouncing elastically between walls."""
    span = hi - lo
    u = np.mod(np.asarray(x) - lo, 2 * span)
    return lo + np.where(u <= span, u, 2 * span - u)


def bounce_params(rng: np.random.Generator) -> dict:
    r = rng.uniform(0.12, 0.2)
    return {"radius": r, "start": rng.uniform(r, 1 - r, 2), "velocity": rng.uniform(-1.5, 1.5, 2),
            "color": rng.uniform(0.5, 1.0, 3), "background": rng.uniform(0.0, 0.25, 3)}


def bounce_center(p: dict, t) -> np.ndarray:
    """Disc center in unit-square coordinates (x right, y down) at time(s) ``t``."""
    t = np.asarray(t, dtype=float)[..., None]
    r = p["radius"]
    return fold(p["start"] + p["velocity"] * t, r, 1 - r)


def render_bounce(p: dict, times: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    out = np.empty((len(times), h, w, 3))
    for k, c in enumerate(bounce_center(p, times)):
        inside = (xs[None, :] - c[0]) ** 2 + (ys[:, None] - c[1]) ** 2 <= p["radius"] ** 2
        out[k] = np.where(inside[..., None], p["color"], p["background"])
    return out


ORBIT_DISTANCE = 2.5
ORBIT_FOV_DEG = 40.0
ORBIT_LIGHT = np.array([0.5, 0.7, 0.5]) / np.linalg.norm([0.5, 0.7, 0.5])


def orbit_params(rng: np.random.Generator) -> dict:
    return {"albedo": rng.uniform(0.4, 1.0, 3), "background": rng.uniform(0.0, 0.2, 3),
            "yaw0": rng.uniform(-np.pi, np.pi), "omega": rng.uniform(-1.0, 1.0),
            "pitch": rng.uniform(-0.3, 0.3), "radius": rng.uniform(0.6, 0.9)}


def orbit_yaws(p: dict, times) -> np.ndarray:
    return p["yaw0"] + p["omega"] * np.asarray(times)


def render_orbit(p: dict, times: np.ndarray, h: int, w: int) -> np.ndarray:
    """Lambert-shaded sphere at the origin, camera circling it at fixed pitch."""
    out = np.empty((len(times), h, w, 3))
    half = np.tan(np.deg2rad(ORBIT_FOV_DEG) / 2)
    xs = (2 * (np.arange(w) + 0.5) / w - 1) * half * (w / h)
    ys = (1 - 2 * (np.arange(h) + 0.5) / h) * half
    for k, yaw in enumerate(orbit_yaws(p, times)):
        cp = np.cos(p["pitch"])
        eye = ORBIT_DISTANCE * np.array([cp * np.sin(yaw), np.sin(p["pitch"]), cp * np.cos(yaw)])
        fwd = -eye / np.linalg.norm(eye)
        right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        d = fwd + xs[None, :, None] * right + ys[:, None, None] * up
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        b = d @ eye
        disc = b * b - (eye @ eye - p["radius"] ** 2)
        hit = disc >= 0
        dist = -b - np.sqrt(np.where(hit, disc, 0.0))
        normal = (eye + dist[..., None] * d) / p["radius"]
        shade = 0.2 + 0.8 * np.clip(normal @ ORBIT_LIGHT, 0.0, None)
        out[k] = np.where(hit[..., None], p["albedo"] * shade[..., None], p["background"])
    return out


_GENERATORS = {
    "blink": (blink_params, render_blink),
    "bounce": (bounce_params, render_bounce),
    "orbit": (orbit_params, render_orbit),
}


def make_clip(kind: str, index: int, frames: int, h: int, w: int, seed: int) -> tuple[np.ndarray, dict]:
    """Frames as floats in [0, 1] plus metadata; each clip has its own seed stream."""
    if kind not in _GENERATORS:
        raise CorpusError(f"unknown corpus kind {kind!r}; choose from {KINDS}")
    params_fn, render_fn = _GENERATORS[kind]
    rng = np.random.default_rng([seed, index])
    p = params_fn(rng)
    clip = np.clip(render_fn(p, frame_times(frames), h, w), 0.0, 1.0)
    meta = {"kind": kind, "index": index, "seed": seed, **p}
    if kind == "orbit":
        meta["camera_yaw"] = orbit_yaws(p, frame_times(frames))
        meta["camera_distance"] = ORBIT_DISTANCE
    return clip, meta


# ---------------------------------------------------------------- corpus

def _format_value(v) -> str:
    if isinstance(v, np.ndarray):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={_format_value(v)}\n" for k, v in items.items()))


def read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


@dataclass
class Corpus:
    root: Path
    kind: str
    clips: int
    frames: int
    height: int
    width: int
    seed: int
    _cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise CorpusError(f"{root} has no manifest.txt")
        kv = read_kv(manifest)
        if kv.get("format") != FORMAT:
            raise CorpusError(f"{manifest}: unsupported format {kv.get('format')!r}")
        c = cls(root, kv["kind"], int(kv["clips"]), int(kv["frames"]), int(kv["height"]),
                int(kv["width"]), int(kv["seed"]))
        c.validate()
        return c

    def clip_dir(self, i: int) -> Path:
        return self.root / f"clip_{i:05d}"

    def validate(self) -> None:
        if self.clips < 1:
            raise CorpusError("corpus is empty")
        found = sorted(p.name for p in self.root.glob("clip_*") if p.is_dir())
        if len(found) != self.clips:
            raise CorpusError(f"manifest lists {self.clips} clips, found {len(found)}")
        for i in range(self.clips):
            files = sorted(self.clip_dir(i).glob("frame_*.ppm"))
            if len(files) != self.frames:
                raise CorpusError(f"clip {i}: expected {self.frames} frames, found {len(files)}")

    def uint8(self) -> np.ndarray:
        """All frames, (clips, F, H, W, 3) uint8; read once."""
        if self._cache is None:
            arr = np.empty((self.clips, self.frames, self.height, self.width, 3), np.uint8)
            for i in range(self.clips):
                for j in range(self.frames):
                    img = read_ppm(self.clip_dir(i) / f"frame_{j:02d}.ppm")
                    if img.shape != (self.height, self.width, 3):
                        raise CorpusError(f"clip {i} frame {j} has shape {img.shape}")
                    arr[i, j] = img
            self._cache = arr
        return self._cache

    def frames_float(self) -> np.ndarray:
        return self.uint8().astype(np.float64) / 255.0


def generate_corpus(kind: str, n_clips: int, frames: int, height: int, width: int, seed: int,
                    out_dir) -> Corpus:
    if kind not in KINDS:
        raise CorpusError(f"unknown corpus kind {kind!r}; choose from {KINDS}")
    if n_clips < 1:
        raise CorpusError("need at least one clip")
    if frames < 2 or height < 1 or width < 1:
        raise CorpusError("clips need at least 2 frames and positive extents")
    if frames > 100:
        raise CorpusError("frame names use two digits; at most 100 frames")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_clips):
        clip, meta = make_clip(kind, i, frames, height, width, seed)
        d = root / f"clip_{i:05d}"
        d.mkdir(exist_ok=True)
        for j, frame in enumerate(clip):
            write_ppm(d / f"frame_{j:02d}.ppm", quantize(frame))
        _write_kv(d / "meta.txt", meta)
    _write_kv(root / "manifest.txt", {"format": FORMAT, "kind": kind, "clips": n_clips,
                                      "frames": frames, "height": height, "width": width,
                                      "seed": seed})
    return Corpus.load(root)


# ---------------------------------------------------------------- sampling

def pair_indices(frames: int, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` index pairs i < j, uniform over the C(F, 2) unordered pairs."""
    first = rng.integers(0, frames, n)
    second = rng.integers(0, frames - 1, n)
    second = second + (second >= first)  # uniform over the other F-1 indices
    return np.minimum(first, second), np.maximum(first, second)


def sample_real_pairs(corpus: Corpus, rng: np.random.Generator, n: int) -> FramePair:
    data = corpus.uint8()
    if data.shape[0] == 0:
        raise CorpusError("corpus is empty")
    clips = rng.integers(0, corpus.clips, n)
    i, j = pair_indices(corpus.frames, rng, n)
    a = data[clips, i].astype(np.float64) / 255.0
    b = data[clips, j].astype(np.float64) / 255.0
    return FramePair(a, b, (j - i) / (corpus.frames - 1))


def sample_real_pair(corpus: Corpus, rng: np.random.Generator) -> FramePair:
    pair = sample_real_pairs(corpus, rng, 1)
    return FramePair(pair.frame_a[0], pair.frame_b[0], pair.dt[:1])


def sample_real_frames(corpus: Corpus, rng: np.random.Generator, n: int) -> np.ndarray:
    data = corpus.uint8()
    clips = rng.integers(0, corpus.clips, n)
    idx = rng.integers(0, corpus.frames, n)
    return data[clips, idx].astype(np.float64) / 255.0


def dt_law(frames: int) -> dict[int, float]:
    """P(j - i = k) for a uniform unordered pair of distinct indices."""
    total = frames * (frames - 1) / 2
    return {k: (frames - k) / total for k in range(1, frames)}


# ---------------------------------------------------------------- statistics

@dataclass
class CorpusStats:
    channel_mean: np.ndarray
    channel_std: np.ndarray
    temporal_energy: float
    brightness_mean: float
    brightness_std: float
    frames: int


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Exact statistics over every frame: integer accumulation, independent of clip order."""
    data = corpus.uint8()
    if data.size == 0:
        raise CorpusError("corpus is empty")
    ch_sum = np.zeros(3, dtype=np.int64)
    ch_sq = np.zeros(3, dtype=np.int64)
    diff_sq = 0
    frame_sum = 0  # sum over frames of the per-frame pixel sum
    frame_sq = 0  # sum over frames of the squared per-frame pixel sum
    for clip in data:
        c = clip.astype(np.int64)
        ch_sum += c.sum(axis=(0, 1, 2))
        ch_sq += (c * c).sum(axis=(0, 1, 2))
        d = np.diff(c, axis=0)
        diff_sq += int((d * d).sum())
        per_frame = c.sum(axis=(1, 2, 3))
        frame_sum += int(per_frame.sum())
        frame_sq += sum(int(v) * int(v) for v in per_frame)
    n_frames = data.shape[0] * data.shape[1]
    px = n_frames * data.shape[2] * data.shape[3]
    mean = ch_sum / px
    var = ch_sq / px - mean ** 2
    per = data.shape[2] * data.shape[3] * 3 * 255.0
    b_mean = frame_sum / n_frames / per
    b_var = max(frame_sq / n_frames / per ** 2 - b_mean ** 2, 0.0)
    n_diffs = data.shape[0] * (data.shape[1] - 1) * data.shape[2] * data.shape[3] * 3
    return CorpusStats(mean / 255.0, np.sqrt(np.maximum(var, 0.0)) / 255.0,
                       diff_sq / n_diffs / 255.0 ** 2, b_mean, math.sqrt(b_var), n_frames)


def frame_brightness(frames: np.ndarray) -> np.ndarray:
    """Mean over pixels and channels, per frame; frames as floats in [0, 1]."""
    return frames.reshape(frames.shape[0], -1).mean(axis=1)

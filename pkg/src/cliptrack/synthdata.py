"""Synthetic long videos with ground-truth tracks and a stand-in frame detector.

Objects are small grid shapes (the shape is a proxy for the class) moving on
piecewise-linear, wall-bouncing trajectories. Scenario events: staggered
births, full occlusion behind a later (front) object, and disappearance with
reappearance after a gap. Everything is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, FormatError

DATASET_MAGIC = b"CTSV"
DATASET_VERSION = 1

# fixed seeds for the global embedding tables (class directions, background)
_CLASS_TABLE_SEED = 1_000_003
_BACKGROUND_SEED = 1_000_033


@dataclass(frozen=True)
class ScenarioConfig:
    num_frames_min: int = 15
    num_frames_max: int = 40
    grid: int = 16
    dim: int = 32
    num_frame_queries: int = 8
    num_classes: int = 4
    num_queries: int = 8
    min_objects: int = 2
    max_objects: int = 4
    size_min: int = 2
    size_max: int = 3
    speed_min: float = 0.3
    speed_max: float = 1.0
    birth_prob: float = 0.5
    occlusion_prob: float = 0.2
    occlusion_len_min: int = 2
    occlusion_len_max: int = 4
    reappear_prob: float = 0.3
    reappear_gap_min: int = 3
    reappear_gap_max: int = 8
    class_weight: float = 1.0
    background_scale: float = 0.5
    query_noise: float = 0.1
    feature_noise: float = 0.05

    def validate(self) -> "ScenarioConfig":
        if not (4 <= self.num_frames_min <= self.num_frames_max <= 200):
            raise ConfigError(f"frame count range [{self.num_frames_min}, {self.num_frames_max}] "
                              "must lie inside [4, 200]")
        if self.grid not in (8, 16, 32):
            raise ConfigError(f"grid must be 8, 16 or 32, got {self.grid}")
        for name in ("birth_prob", "occlusion_prob", "reappear_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} is not a probability")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.num_queries:
            raise ConfigError(f"max_objects={self.max_objects} exceeds num_queries={self.num_queries}")
        if self.max_objects > self.num_frame_queries:
            raise ConfigError(f"max_objects={self.max_objects} exceeds "
                              f"num_frame_queries={self.num_frame_queries}")
        if not 1 <= self.size_min <= self.size_max:
            raise ConfigError("need 1 <= size_min <= size_max")
        if 2 * self.size_max + 1 > self.grid:
            raise ConfigError(f"shapes of half-extent {self.size_max} do not fit a {self.grid} grid")
        box = (2 * self.size_max + 1) ** 2
        if self.max_objects * box > self.grid * self.grid:
            raise ConfigError(f"{self.max_objects} objects of extent {self.size_max} "
                              f"cannot be hosted by a {self.grid}x{self.grid} grid")
        if self.num_classes < 1 or self.dim < 2:
            raise ConfigError("num_classes and dim must be positive")
        if not 1 <= self.reappear_gap_min <= self.reappear_gap_max:
            raise ConfigError("need 1 <= reappear_gap_min <= reappear_gap_max")
        if not 1 <= self.occlusion_len_min <= self.occlusion_len_max:
            raise ConfigError("need 1 <= occlusion_len_min <= occlusion_len_max")
        if self.query_noise < 0 or self.feature_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def load_scenario(path) -> ScenarioConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return ScenarioConfig.from_dict(raw.get("scenario", raw)).validate()


@dataclass
class TrackAnnotation:
    track_id: int
    class_id: int
    masks: np.ndarray  # T x G x G bool, all-false where invisible
    identity: np.ndarray  # d, unit norm

    @property
    def visibility(self) -> np.ndarray:
        return self.masks.any(axis=(1, 2))

    @property
    def birth_frame(self) -> int:
        return int(np.argmax(self.visibility))

    def mask(self, t: int) -> np.ndarray | None:
        m = self.masks[t]
        return m if m.any() else None


@dataclass
class SyntheticVideo:
    config: ScenarioConfig
    seed: int
    labels: np.ndarray  # T x G x G int16 owner map, -1 for background
    tracks: list[TrackAnnotation]

    @property
    def num_frames(self) -> int:
        return self.labels.shape[0]

    @property
    def grid(self) -> int:
        return self.labels.shape[1]

    def identity_table(self) -> np.ndarray:
        d = self.config.dim
        return np.stack([t.identity for t in self.tracks]) if self.tracks else np.zeros((0, d))

    def frame_features(self, frames) -> np.ndarray:
        """``len(frames) x G x G x d`` feature grids (owner identity + noise)."""
        cfg = self.config
        table = np.vstack([self.identity_table(), np.zeros((1, cfg.dim))])
        out = []
        for t in frames:
            f = table[self.labels[t]]  # label -1 picks the zero row
            if cfg.feature_noise > 0:
                rng = np.random.default_rng([self.seed, 1, int(t)])
                f = f + cfg.feature_noise * rng.standard_normal(f.shape)
            out.append(f)
        return np.stack(out) if out else np.zeros((0, self.grid, self.grid, cfg.dim))

    @property
    def frame_feature_maps(self) -> np.ndarray:
        return self.frame_features(range(self.num_frames))

    def frame_queries(self, frames) -> np.ndarray:
        return np.stack([simulate_frame_queries(self, t, self.config.query_noise, self.seed)
                         for t in frames])

    def visible_tracks(self, t: int) -> list[int]:
        return [tr.track_id for tr in self.tracks if tr.masks[t].any()]

    def reappearance_events(self) -> list[tuple[int, int, int]]:
        """``(track_id, last_frame_before_gap, first_frame_after_gap)`` per visibility gap."""
        events = []
        for tr in self.tracks:
            vis = np.flatnonzero(tr.visibility)
            for a, b in zip(vis[:-1], vis[1:]):
                if b > a + 1:
                    events.append((tr.track_id, int(a), int(b)))
        return events

    def equals(self, other: "SyntheticVideo") -> bool:
        if self.seed != other.seed or self.config != other.config:
            return False
        if self.labels.tobytes() != other.labels.tobytes() or len(self.tracks) != len(other.tracks):
            return False
        return all(a.track_id == b.track_id and a.class_id == b.class_id
                   and a.masks.tobytes() == b.masks.tobytes()
                   and a.identity.tobytes() == b.identity.tobytes()
                   for a, b in zip(self.tracks, other.tracks))


def class_directions(num_classes: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([_CLASS_TABLE_SEED, num_classes, dim])
    v = rng.standard_normal((num_classes, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def background_embeddings(count: int, dim: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([_BACKGROUND_SEED, count, dim])
    v = rng.standard_normal((count, dim))
    return scale * v / np.linalg.norm(v, axis=1, keepdims=True)


def shape_mask(class_id: int, size: int, cy: int, cx: int, grid: int) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    kind = class_id % 4
    if kind == 0:  # square
        m = (dy <= size) & (dx <= size)
    elif kind == 1:  # diamond
        m = dy + dx <= size
    elif kind == 2:  # cross
        m = ((dy <= size) & (dx <= 0)) | ((dx <= size) & (dy <= 0))
    else:  # flat bar
        m = (dy <= max(1, size // 2)) & (dx <= size)
    return m


def _trajectory(rng, T: int, size: int, grid: int, cfg: ScenarioConfig) -> np.ndarray:
    lo, hi = float(size), float(grid - 1 - size)
    pos = rng.uniform(lo, hi, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    vel = rng.uniform(cfg.speed_min, cfg.speed_max) * np.array([np.sin(angle), np.cos(angle)])
    out = np.empty((T, 2))
    for t in range(T):
        out[t] = pos
        pos = pos + vel
        for a in range(2):
            if pos[a] < lo:
                pos[a], vel[a] = 2 * lo - pos[a], -vel[a]
            elif pos[a] > hi:
                pos[a], vel[a] = 2 * hi - pos[a], -vel[a]
        pos = np.clip(pos, lo, hi)
    return out


def generate_video(cfg: ScenarioConfig, seed: int) -> SyntheticVideo:
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0])
    G = cfg.grid
    T = int(rng.integers(cfg.num_frames_min, cfg.num_frames_max + 1))
    K = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    classes = rng.integers(0, cfg.num_classes, size=K)
    sizes = rng.integers(cfg.size_min, cfg.size_max + 1, size=K)
    paths = [_trajectory(rng, T, int(sizes[k]), G, cfg) for k in range(K)]
    present = np.ones((K, T), dtype=bool)
    for k in range(1, K):
        if T > 2 and rng.random() < cfg.birth_prob:
            present[k, : int(rng.integers(1, max(2, T // 2)))] = False
    for k in range(K):
        if rng.random() < cfg.reappear_prob:
            gap = int(rng.integers(cfg.reappear_gap_min, cfg.reappear_gap_max + 1))
            first = int(np.argmax(present[k]))
            lo, hi = first + 1, T - gap - 1  # keep >= 1 visible frame on both sides
            if hi >= lo:
                start = int(rng.integers(lo, hi + 1))
                present[k, start:start + gap] = False
    for k in range(K - 1):
        if rng.random() < cfg.occlusion_prob:
            front = int(rng.integers(k + 1, K))  # later tracks are drawn on top
            both = np.flatnonzero(present[k] & present[front])
            length = int(rng.integers(cfg.occlusion_len_min, cfg.occlusion_len_max + 1))
            if len(both) > length + 1:
                start = int(rng.choice(both[1:len(both) - length]))
                for t in range(start, start + length):
                    if present[front, t]:
                        paths[k][t] = paths[front][t]

    labels = np.full((T, G, G), -1, dtype=np.int16)
    for k in range(K):  # depth order: later index on top
        for t in np.flatnonzero(present[k]):
            cy, cx = np.rint(paths[k][t]).astype(int)
            labels[t][shape_mask(int(classes[k]), int(sizes[k]), cy, cx, G)] = k

    table = class_directions(cfg.num_classes, cfg.dim)
    tracks: list[TrackAnnotation] = []
    remap = np.full(K + 1, -1, dtype=np.int16)  # index K handles label -1
    for k in range(K):
        masks = labels == k
        if not masks.any():
            continue
        r = rng.standard_normal(cfg.dim)
        e = cfg.class_weight * table[classes[k]] + r / np.linalg.norm(r)
        tid = len(tracks)
        remap[k] = tid
        tracks.append(TrackAnnotation(tid, int(classes[k]), masks, e / np.linalg.norm(e)))
    labels = remap[np.where(labels < 0, K, labels)]
    return SyntheticVideo(cfg, int(seed), labels.astype(np.int16), tracks)


def simulate_frame_queries(video: SyntheticVideo, frame: int, noise: float, seed: int) -> np.ndarray:
    """Unordered ``N_q_frame x d`` detector queries for one frame."""
    cfg = video.config
    if not 0 <= frame < video.num_frames:
        raise IndexError(f"frame {frame} outside [0, {video.num_frames})")
    rng = np.random.default_rng([int(seed), 2, int(frame)])
    slots = cfg.num_frame_queries
    visible = video.visible_tracks(frame)
    bg = background_embeddings(slots, cfg.dim, cfg.background_scale)
    rows = [video.tracks[t].identity for t in visible] + list(bg[: slots - len(visible)])
    q = np.stack(rows)
    if noise > 0:
        q = q + noise * rng.standard_normal(q.shape)
    return q[rng.permutation(slots)]


@dataclass
class Clip:
    clip_index: int
    start: int
    stop: int
    frame_queries: np.ndarray  # N_f x N_q_frame x d
    features: np.ndarray  # N_f x G x G x d
    masks: dict[int, np.ndarray]  # track_id -> N_f x G x G, for tracks visible in the clip
    classes: dict[int, int]  # track_id -> class id, every track of the video
    newborn_track_ids: list[int] = field(default_factory=list)

    @property
    def frame_indices(self) -> range:
        return range(self.start, self.stop)

    @property
    def length(self) -> int:
        return self.stop - self.start

    def target_mask(self, track_id: int) -> np.ndarray:
        """Clip mask for a track; all-empty when the track is invisible here."""
        m = self.masks.get(track_id)
        if m is None:
            G = self.features.shape[1]
            return np.zeros((self.length, G, G), dtype=bool)
        return m


def split_clips(video: SyntheticVideo, clip_len: int, start: int = 0,
                num_clips: int | None = None, with_features: bool = True) -> list[Clip]:
    """Non-overlapping clips of ``clip_len`` frames covering ``[start, T)`` in order.

    Newborn ids are relative to ``start``: a track is newborn in the clip that
    holds its first visible frame at or after ``start``.
    """
    if clip_len < 1:
        raise ConfigError(f"clip length must be >= 1, got {clip_len}")
    T = video.num_frames
    if not 0 <= start < T:
        raise ConfigError(f"start frame {start} outside [0, {T})")
    bounds = list(range(start, T, clip_len))
    if num_clips is not None:
        bounds = bounds[:num_clips]
    return window_clips(video, bounds, clip_len, with_features)


def window_clips(video: SyntheticVideo, starts: list[int], clip_len: int,
                 with_features: bool = True) -> list[Clip]:
    """Clips beginning at each of ``starts`` (ascending, non-overlapping).

    Newborn ids are relative to ``starts[0]``.
    """
    T = video.num_frames
    first_seen = {}
    for tr in video.tracks:
        vis = np.flatnonzero(tr.visibility[starts[0]:])
        if len(vis):
            first_seen[tr.track_id] = starts[0] + int(vis[0])
    classes = {tr.track_id: tr.class_id for tr in video.tracks}
    G, d = video.grid, video.config.dim
    clips = []
    prev_hi = starts[0]
    for i, lo in enumerate(starts):
        hi = min(lo + clip_len, T)
        # tracks first seen inside a skipped gap count as newborn in the next clip
        born_lo = prev_hi if i else starts[0]
        frames = range(lo, hi)
        masks = {tr.track_id: tr.masks[lo:hi] for tr in video.tracks if tr.masks[lo:hi].any()}
        feats = video.frame_features(frames) if with_features else np.zeros((hi - lo, G, G, d))
        newborn = sorted(t for t, f in first_seen.items() if born_lo <= f < hi and t in masks)
        clips.append(Clip(
            clip_index=i, start=lo, stop=hi,
            frame_queries=video.frame_queries(frames),
            features=feats, masks=masks, classes=classes,
            newborn_track_ids=newborn,
        ))
        prev_hi = hi
    return clips


# ---------------------------------------------------------------- file format

def save_video(video: SyntheticVideo, path):
    header = {
        "config": video.config.to_dict(),
        "seed": video.seed,
        "num_frames": video.num_frames,
        "grid": video.grid,
        "tracks": [{"track_id": t.track_id, "class_id": t.class_id} for t in video.tracks],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<II", DATASET_VERSION, len(blob))
    out += blob
    out += video.labels.astype("<i2").tobytes()
    out += video.identity_table().astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_video(path) -> SyntheticVideo:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a synthetic video file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset format version {version}, this build reads "
                          f"version {DATASET_VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    cfg = ScenarioConfig.from_dict(header["config"])
    T, G = header["num_frames"], header["grid"]
    K = len(header["tracks"])
    off = 12 + hlen
    need = off + 2 * T * G * G + 8 * K * cfg.dim
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)} (truncated?)")
    labels = np.frombuffer(raw, dtype="<i2", count=T * G * G, offset=off).reshape(T, G, G)
    off += 2 * T * G * G
    ident = np.frombuffer(raw, dtype="<f8", count=K * cfg.dim, offset=off).reshape(K, cfg.dim)
    labels = labels.astype(np.int16)
    tracks = [TrackAnnotation(m["track_id"], m["class_id"], labels == m["track_id"],
                              ident[i].astype(np.float64))
              for i, m in enumerate(header["tracks"])]
    return SyntheticVideo(cfg, int(header["seed"]), labels, tracks)


def generate_dataset(cfg: ScenarioConfig, seed: int, count: int) -> list[SyntheticVideo]:
    """``count`` videos with per-video seeds drawn from one root seed."""
    seeds = np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint32)
    return [generate_video(cfg, int(s)) for s in seeds]


def save_dataset(videos: list[SyntheticVideo], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(videos):
        p = d / f"video_{i:05d}.ctsv"
        save_video(v, p)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[SyntheticVideo]:
    paths = sorted(Path(directory).glob("video_*.ctsv"))
    if not paths:
        raise FormatError(f"{directory}: no video files found")
    return [load_video(p) for p in paths]

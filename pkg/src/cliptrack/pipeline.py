"""Multi-clip training, heuristic-free inference, and the association baselines."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .assignment import hungarian_solve
from .errors import ConfigError, FormatError, InfeasibleError
from .model import ClipChain, ClipModel, ModelConfig
from .numerics import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .synthdata import (SyntheticVideo, background_embeddings, class_directions, split_clips,
                        window_clips)
from .uvla import (DEFAULT_ALPHA, OCCLUDED_TARGETS, MatchWeights, OccupiedSet, build_targets,
                   compute_losses, correspondence_assign, trace_record, update_occupied,
                   uvla_assign)

log = logging.getLogger(__name__)

BASELINES = ("none", "two_clip_correspondence", "cosine_stitch")
LR_SCHEDULES = ("constant", "cosine")
RESULTS_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n_v_train: int = 5
    n_f_train: int = 1
    epochs: int = 30
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    batch_videos: int = 2
    windows_per_video: int = 3
    identity_augment: bool = True
    seed: int = 0
    memory_enabled: bool = True
    memory_mode: str = "index_wise"
    uvla_enabled: bool = True
    baseline: str = "none"
    alpha: float = DEFAULT_ALPHA
    cost_cls: float = 2.0
    cost_mask: float = 5.0
    cost_dice: float = 5.0
    no_object_weight: float = 0.1
    occluded_class_target: str = "track_class"
    supervise_hidden_masks: bool = True
    aux_loss: bool = False
    gapped_sampling: bool = True
    max_gap: int = 2
    truncate_chain: bool = False
    grad_clip: float = 1.0
    enc_layers: int = 2
    dec_layers: int = 2
    dim: int = 32
    num_queries: int = 8
    num_classes: int = 4
    ffn_dim: int = 64
    num_heads: int = 1

    def validate(self) -> "TrainConfig":
        if self.n_v_train < 1 or self.n_f_train < 1:
            raise ConfigError("n_v_train and n_f_train must be >= 1")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.occluded_class_target not in OCCLUDED_TARGETS:
            raise ConfigError(f"occluded_class_target must be one of {OCCLUDED_TARGETS}")
        if self.epochs < 1 or self.batch_videos < 1 or self.windows_per_video < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_videos, windows_per_video and lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        self.model_config()
        return self

    @property
    def effective_n_v(self) -> int:
        if self.baseline == "two_clip_correspondence":
            return 2
        if self.baseline == "cosine_stitch":
            return 1
        return self.n_v_train

    @property
    def association(self) -> str:
        """How targets are paired across the clips of one training sample."""
        if self.baseline != "none" or not self.uvla_enabled:
            return "correspondence"
        return "uvla"

    @property
    def weights(self) -> MatchWeights:
        return MatchWeights(self.cost_cls, self.cost_mask, self.cost_dice)

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, num_queries=self.num_queries, num_classes=self.num_classes,
                           enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                           ffn_dim=self.ffn_dim, num_heads=self.num_heads,
                           memory_enabled=self.memory_enabled,
                           memory_mode=self.memory_mode, init_seed=self.seed).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown train keys: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: ParamStore
    config: TrainConfig
    loss_curve: list[float]
    skipped_videos: int = 0

    @property
    def model(self) -> ClipModel:
        return ClipModel(self.config.model_config(), self.params)

    def checkpoint_header(self) -> dict:
        return {"format": "cliptrack-checkpoint", "train": self.config.to_dict(),
                "model": self.config.model_config().to_dict()}

    def save(self, path):
        save_checkpoint(path, self.params, self.checkpoint_header())


def load_model(path) -> tuple[ClipModel, TrainConfig]:
    params, header = load_checkpoint(path)
    if "train" not in header or "model" not in header:
        raise FormatError(f"{path}: checkpoint header lacks model hyperparameters")
    cfg = TrainConfig.from_dict(header["train"])
    return ClipModel(ModelConfig.from_dict(header["model"]), params), cfg


# ---------------------------------------------------------------- training

def feasible(video: SyntheticVideo, num_queries: int) -> bool:
    return len(video.tracks) <= num_queries


def _sample_starts(rng, T: int, n_clips: int, n_f: int, gapped: bool, max_gap: int) -> list[int]:
    slack = T - n_clips * n_f
    gaps = [0] * n_clips
    if gapped and n_clips > 1 and slack > 0:
        for i in range(1, n_clips):
            g = int(rng.integers(0, min(max_gap, slack) + 1))
            gaps[i], slack = g, slack - g
    first = int(rng.integers(0, slack + 1))
    starts, pos = [], first
    for i in range(n_clips):
        pos += gaps[i]
        starts.append(pos)
        pos += n_f
    return starts


def identity_rotation(rng, fixed: np.ndarray) -> np.ndarray:
    """Random orthogonal map that is the identity on ``span(fixed)`` and rotates its complement.

    Applied to a whole training window it turns every track identity into a
    fresh one while keeping class directions and background slots intact.
    """
    dim = fixed.shape[1]
    basis, _ = np.linalg.qr(fixed.T, mode="complete")
    k = np.linalg.matrix_rank(fixed)
    keep, comp = basis[:, :k], basis[:, k:]
    o, r = np.linalg.qr(rng.standard_normal((dim - k, dim - k)))
    o = o * np.sign(np.diag(r))
    return keep @ keep.T + comp @ o @ comp.T


def _rotate_window(clips, rot):
    return [dataclasses.replace(c, frame_queries=c.frame_queries @ rot, features=c.features @ rot)
            for c in clips]


def _clip_batch(clips_per_video, i):
    fq = np.stack([c[i].frame_queries for c in clips_per_video])
    feats = np.stack([c[i].features for c in clips_per_video])
    return fq, feats


def sequence_loss(model: ClipModel, cfg: TrainConfig, clips_per_video: list, assignments=None):
    """Summed per-clip loss over one batch of clip sequences.

    Runs the shared clip chain, assigns targets per video (unless frozen
    ``assignments`` are supplied, which gradient checks use), and returns
    ``(loss, assignments)``.
    """
    b = len(clips_per_video)
    n_clips = len(clips_per_video[0])
    chain = ClipChain(model, b, cfg.memory_enabled, cfg.memory_mode, cfg.truncate_chain, cfg.aux_loss)
    w = cfg.weights
    n_q, n_c = model.cfg.num_queries, model.cfg.num_classes
    omegas = [OccupiedSet() for _ in range(b)]
    carried: list[dict[int, int]] = [{} for _ in range(b)]
    made = [] if assignments is None else assignments
    total = None
    for i in range(n_clips):
        fq, feats = _clip_batch(clips_per_video, i)
        _, pred = chain.step(fq, feats)
        targets = []
        for v in range(b):
            clip = clips_per_video[v][i]
            if assignments is not None:
                a = assignments[i][v]
            elif cfg.association == "uvla":
                a = uvla_assign(pred, clip, omegas[v], w, cfg.alpha, b=v)
                omegas[v] = update_occupied(omegas[v], a, i)
            else:
                a = correspondence_assign(pred, clip, carried[v], w, b=v)
                carried[v] = {t: j for t, j in a.matched + a.direct_matches}
            if assignments is None:
                if v == 0:
                    made.append([])
                made[i].append(a)
            targets.append(build_targets(a, clip, n_q, n_c, cfg.no_object_weight,
                                         cfg.occluded_class_target, cfg.supervise_hidden_masks))
        loss = compute_losses(pred, targets, w)
        for aux in chain.aux_predictions:  # same targets as the final layer
            loss = nx.add(loss, compute_losses(aux, targets, w))
        total = loss if total is None else nx.add(total, loss)
    return total, made


def _clip_grads(params: ParamStore, max_norm: float):
    if max_norm <= 0:
        return
    norm = np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.items()))
    if norm > max_norm:
        for _, t in params.items():
            t.grad *= max_norm / norm


def train(cfg: TrainConfig, videos: list[SyntheticVideo], progress=None) -> TrainResult:
    """Train on ``videos``; deterministic for a fixed (config, data)."""
    cfg.validate()
    model = ClipModel(cfg.model_config())
    params = model.params
    params.zero_grad()
    rng = np.random.default_rng([cfg.seed, 7])
    usable = [v for v in videos if feasible(v, cfg.num_queries) and v.num_frames >= cfg.n_f_train]
    skipped = len(videos) - len(usable)
    if skipped:
        log.warning("skipping %d infeasible videos", skipped)
    if not usable:
        raise InfeasibleError("no feasible training videos")
    n_v = cfg.effective_n_v
    fixed = None
    if cfg.identity_augment:
        sc = usable[0].config
        fixed = np.concatenate([class_directions(sc.num_classes, sc.dim),
                                background_embeddings(sc.num_frame_queries, sc.dim, 1.0)])
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr
        if cfg.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        # each video contributes windows_per_video independently sampled windows
        order = rng.permutation(np.repeat(np.arange(len(usable)), cfg.windows_per_video))
        losses = []
        for lo in range(0, len(order), cfg.batch_videos):
            batch = [usable[k] for k in order[lo:lo + cfg.batch_videos]]
            n_clips = min(n_v, min(v.num_frames // cfg.n_f_train for v in batch))
            clips = []
            for v in batch:
                starts = _sample_starts(rng, v.num_frames, n_clips, cfg.n_f_train,
                                        cfg.gapped_sampling, cfg.max_gap)
                window = window_clips(v, starts, cfg.n_f_train)
                if fixed is not None:
                    window = _rotate_window(window, identity_rotation(rng, fixed))
                clips.append(window)
            loss, _ = sequence_loss(model, cfg, clips)
            loss.backward()
            _clip_grads(params, cfg.grad_clip)
            adam_step(params, lr)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if progress:
            progress(epoch, curve[-1])
    return TrainResult(params, cfg, curve, skipped)


def save_loss_curve(curve: list[float], path):
    lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_loss_curve(path) -> list[float]:
    rows = Path(path).read_text().strip().splitlines()[1:]
    return [float(r.split(",")[1]) for r in rows]


# ---------------------------------------------------------------- inference

@dataclass
class OutputTrack:
    identity: int
    query_index: int
    class_id: int
    confidence: float
    masks: np.ndarray  # T x G x G bool
    clip_labels: list[tuple[int, int, float]] = field(default_factory=list)  # clip, class, prob


@dataclass
class VideoResult:
    num_frames: int
    grid: int
    mode: str
    tracks: list[OutputTrack]
    # per clip: identity -> query index that emitted it
    trace: list[dict[int, int]] = field(default_factory=list)
    clip_bounds: list[tuple[int, int]] = field(default_factory=list)
    prototypes: list[np.ndarray] | None = None

    def track(self, identity: int) -> OutputTrack:
        for t in self.tracks:
            if t.identity == identity:
                return t
        raise KeyError(identity)

    def frame_masks(self, t: int) -> dict[int, np.ndarray]:
        return {tr.identity: tr.masks[t] for tr in self.tracks if tr.masks[t].any()}


def _clip_outputs(pred, num_classes: int):
    logits = pred.class_logits.data[0]
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    label = prob.argmax(axis=1)
    masks = pred.mask_grid(0) > 0.0
    return label, prob, masks


def _assemble(video_T: int, grid: int, mode: str, num_classes: int, per_clip, identities,
              bounds, prototypes=None) -> VideoResult:
    """Collect per-clip argmax outputs under the per-clip identity maps."""
    slots: dict[int, dict] = {}
    trace = []
    for i, ((label, prob, masks), ident, (lo, hi)) in enumerate(zip(per_clip, identities, bounds)):
        emitted = {}
        for j in range(len(label)):
            c = int(label[j])
            if c >= num_classes:
                continue
            k = int(ident[j])
            s = slots.setdefault(k, {"query": j, "labels": [],
                                     "masks": np.zeros((video_T, grid, grid), dtype=bool)})
            s["labels"].append((i, c, float(prob[j, c])))
            s["masks"][lo:hi] = masks[j][: hi - lo]
            emitted[k] = j
        trace.append(emitted)
    tracks = []
    for k in sorted(slots):
        s = slots[k]
        counts = Counter(c for _, c, _ in s["labels"])
        best = max(counts.values())
        cands = sorted(c for c, n in counts.items() if n == best)
        conf = {c: np.mean([p for _, cc, p in s["labels"] if cc == c]) for c in cands}
        cls = max(cands, key=lambda c: (conf[c], -c))
        tracks.append(OutputTrack(k, s["query"], cls, float(conf[cls]), s["masks"], s["labels"]))
    return VideoResult(video_T, grid, mode, tracks, trace, list(bounds), prototypes)


def infer_video(model: ClipModel, video: SyntheticVideo, n_f_eval: int,
                memory_enabled: bool | None = None, keep_prototypes: bool = False) -> VideoResult:
    """Propagate queries clip to clip; query index is the output identity."""
    clips = split_clips(video, n_f_eval)
    chain = ClipChain(model, 1, memory_enabled)
    per_clip, protos = [], []
    n_c = model.cfg.num_classes
    with nx.no_grad():
        for clip in clips:
            p, pred = chain.step(clip.frame_queries[None], clip.features[None])
            per_clip.append(_clip_outputs(pred, n_c))
            protos.append(p.embeddings.data[0].copy())
    n_q = model.cfg.num_queries
    idents = [np.arange(n_q)] * len(clips)
    bounds = [(c.start, c.stop) for c in clips]
    return _assemble(video.num_frames, video.grid, "propagate", n_c, per_clip, idents, bounds,
                     protos if keep_prototypes else None)


def cosine_identities(prototypes: list[np.ndarray]) -> list[np.ndarray]:
    """Stitch identities clip to clip by Hungarian matching on 1 - cosine similarity."""
    if not prototypes:
        return []
    n_q = prototypes[0].shape[0]
    idents = [np.arange(n_q)]
    for prev, cur in zip(prototypes[:-1], prototypes[1:]):
        a = prev / np.maximum(np.linalg.norm(prev, axis=1, keepdims=True), 1e-12)
        b = cur / np.maximum(np.linalg.norm(cur, axis=1, keepdims=True), 1e-12)
        cols, _ = hungarian_solve(1.0 - a @ b.T)
        nxt = np.empty(n_q, dtype=np.int64)
        for r, c in enumerate(cols):
            nxt[c] = idents[-1][r]
        idents.append(nxt)
    return idents


def cosine_associate(prototypes: list[np.ndarray], per_clip_outputs, bounds, num_frames: int,
                     grid: int, num_classes: int) -> VideoResult:
    idents = cosine_identities(prototypes)
    return _assemble(num_frames, grid, "cosine", num_classes, per_clip_outputs, idents, bounds,
                     prototypes)


def infer_video_independent(model: ClipModel, video: SyntheticVideo, n_f_eval: int) -> VideoResult:
    """Per-clip processing from the learned queries, stitched by cosine similarity."""
    clips = split_clips(video, n_f_eval)
    per_clip, protos = [], []
    n_c = model.cfg.num_classes
    with nx.no_grad():
        for clip in clips:
            chain = ClipChain(model, 1, memory_enabled=False)
            p, pred = chain.step(clip.frame_queries[None], clip.features[None])
            per_clip.append(_clip_outputs(pred, n_c))
            protos.append(p.embeddings.data[0].copy())
    bounds = [(c.start, c.stop) for c in clips]
    return cosine_associate(protos, per_clip, bounds, video.num_frames, video.grid, n_c)


def run_inference(model: ClipModel, cfg: TrainConfig, video: SyntheticVideo, n_f_eval: int) -> VideoResult:
    """Inference as the training configuration prescribes (cosine stitching for its baseline)."""
    if cfg.baseline == "cosine_stitch":
        return infer_video_independent(model, video, n_f_eval)
    return infer_video(model, video, n_f_eval, cfg.memory_enabled)


def identity_violations(result: VideoResult) -> list[str]:
    """Structural checks: no identity reuse, no renaming, full frame coverage."""
    out = []
    ids = [t.identity for t in result.tracks]
    if len(ids) != len(set(ids)):
        out.append("identity emitted by more than one output track")
    if result.mode == "propagate":
        queries = [t.query_index for t in result.tracks]
        if len(queries) != len(set(queries)):
            out.append("query index mapped to more than one identity")
        for i, emitted in enumerate(result.trace):
            for k, j in emitted.items():
                if k != j:
                    out.append(f"clip {i}: identity {k} emitted by query {j}")
    for i, emitted in enumerate(result.trace):
        if len(set(emitted.values())) != len(emitted):
            out.append(f"clip {i}: one query emitted two identities")
    for t in result.tracks:
        if t.masks.shape[0] != result.num_frames:
            out.append(f"identity {t.identity}: masks cover {t.masks.shape[0]} of "
                       f"{result.num_frames} frames")
    covered = sorted(f for lo, hi in result.clip_bounds for f in range(lo, hi))
    if result.clip_bounds and covered != list(range(result.num_frames)):
        out.append("clips do not cover the video exactly once")
    return out


def ground_truth_result(video: SyntheticVideo) -> VideoResult:
    """The ground truth expressed as an inference result (metric sanity fixture)."""
    tracks = [OutputTrack(t.track_id, t.track_id, t.class_id, 1.0, t.masks.copy())
              for t in video.tracks]
    return VideoResult(video.num_frames, video.grid, "ground_truth", tracks)


# ---------------------------------------------------------------- results file

def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the flattened mask, starting with a (possibly zero) run of False."""
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs: list[int], shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return flat.reshape(shape)


def result_to_dict(r: VideoResult) -> dict:
    return {
        "num_frames": r.num_frames, "grid": r.grid, "mode": r.mode,
        "clip_bounds": [list(b) for b in r.clip_bounds],
        "trace": [{str(k): v for k, v in sorted(e.items())} for e in r.trace],
        "tracks": [{
            "identity": t.identity, "query_index": t.query_index, "class_id": t.class_id,
            "confidence": t.confidence,
            "clip_labels": [list(x) for x in t.clip_labels],
            "masks_rle": [rle_encode(t.masks[f]) for f in range(r.num_frames)],
        } for t in r.tracks],
    }


def result_from_dict(d: dict) -> VideoResult:
    G = d["grid"]
    tracks = [OutputTrack(t["identity"], t["query_index"], t["class_id"], t["confidence"],
                          np.stack([rle_decode(m, (G, G)) for m in t["masks_rle"]])
                          if t["masks_rle"] else np.zeros((0, G, G), dtype=bool),
                          [tuple(x) for x in t["clip_labels"]])
              for t in d["tracks"]]
    return VideoResult(d["num_frames"], G, d["mode"], tracks,
                       [{int(k): v for k, v in e.items()} for e in d.get("trace", [])],
                       [tuple(b) for b in d.get("clip_bounds", [])])


def save_results(results: list[VideoResult], path, meta: dict | None = None):
    doc = {"format": "cliptrack-results", "format_version": RESULTS_VERSION,
           "meta": meta or {}, "videos": [result_to_dict(r) for r in results]}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_results(path) -> list[VideoResult]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a results file") from exc
    if doc.get("format") != "cliptrack-results":
        raise FormatError(f"{path}: not a results file")
    if doc.get("format_version") != RESULTS_VERSION:
        raise FormatError(f"{path}: results version {doc.get('format_version')}, expected "
                          f"{RESULTS_VERSION}")
    return [result_from_dict(v) for v in doc["videos"]]


def assignment_trace(model: ClipModel, cfg: TrainConfig, video: SyntheticVideo, n_f: int) -> list[str]:
    """One JSON line per clip: occupancy before/after, matches, costs (UVLA over the whole video)."""
    clips = split_clips(video, n_f)
    chain = ClipChain(model, 1, cfg.memory_enabled, cfg.memory_mode)
    omega = OccupiedSet()
    lines = []
    with nx.no_grad():
        for i, clip in enumerate(clips):
            _, pred = chain.step(clip.frame_queries[None], clip.features[None])
            a = uvla_assign(pred, clip, omega, cfg.weights, cfg.alpha)
            after = update_occupied(omega, a, i)
            lines.append(trace_record(i, omega, after, a))
            omega = after
    return lines

"""Ablation harness: association-learning rows, clip-length sweep, memory readout modes."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClipTrackError, ConfigError
from .metrics import TrackMetrics, evaluate
from .pipeline import TrainConfig, identity_violations, infer_video, run_inference, train
from .synthdata import ScenarioConfig, SyntheticVideo

METRIC_KEYS = ("id_switches", "track_recall", "mean_mask_iou", "reappearance_success")


@dataclass(frozen=True)
class AblationRow:
    name: str
    train: TrainConfig
    n_f_eval: int | None = None  # defaults to the training clip length

    @property
    def eval_clip_len(self) -> int:
        return self.n_f_eval or self.train.n_f_train

    def flags(self) -> dict:
        t = self.train
        cl = t.baseline != "cosine_stitch"
        return {"N_v": t.effective_n_v, "CL": cl, "UVLA": t.association == "uvla",
                "IPM": t.memory_enabled and t.baseline == "none", "N_f": t.n_f_train,
                "memory_mode": t.memory_mode}


@dataclass
class AblationGrid:
    rows: list[AblationRow]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def validate(self) -> "AblationGrid":
        names = [r.name for r in self.rows]
        if len(names) != len(set(names)):
            raise ConfigError("ablation row names must be unique")
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        for r in self.rows:
            r.train.validate()
            if r.eval_clip_len < 1:
                raise ConfigError(f"row {r.name}: n_f_eval must be >= 1")
        return self


def association_rows(base: TrainConfig) -> list[AblationRow]:
    """Rows isolating how inter-clip association is learned, weakest first."""
    n_v = base.n_v_train
    full = dataclasses.replace(base, baseline="none", uvla_enabled=True, memory_enabled=True)
    return [
        AblationRow("N_v=1 cosine", dataclasses.replace(full, baseline="cosine_stitch",
                                                        memory_enabled=False)),
        AblationRow("N_v=2 CL", dataclasses.replace(full, baseline="two_clip_correspondence",
                                                    memory_enabled=False)),
        AblationRow(f"N_v={n_v} CL", dataclasses.replace(full, uvla_enabled=False,
                                                         memory_enabled=False)),
        AblationRow(f"N_v={n_v} CL+UVLA", dataclasses.replace(full, memory_enabled=False)),
        AblationRow(f"N_v={n_v} CL+UVLA+IPM", full),
    ]


def memory_rows(base: TrainConfig) -> list[AblationRow]:
    return [AblationRow(f"memory {m}", dataclasses.replace(base, memory_enabled=True,
                                                           memory_mode=m))
            for m in ("global", "index_wise")]


def reappearance_heavy(cfg: ScenarioConfig) -> ScenarioConfig:
    """Evaluation scenario where most tracks vanish for a while and come back."""
    return dataclasses.replace(cfg, reappear_prob=0.9, reappear_gap_min=3, reappear_gap_max=8,
                               num_frames_min=max(cfg.num_frames_min, 25))


@dataclass
class RowRun:
    row: str
    seed: int
    metrics: dict
    train_seconds: float
    infer_seconds_per_frame: float
    final_loss: float
    identity_violations: int = 0


@dataclass
class AblationReport:
    runs: list[RowRun]
    row_order: list[str]
    row_flags: dict[str, dict]
    extra: dict = field(default_factory=dict)

    def runs_for(self, row: str) -> list[RowRun]:
        return sorted((r for r in self.runs if r.row == row), key=lambda r: r.seed)

    def summary(self) -> dict[str, dict[str, tuple[float | None, float | None]]]:
        """Mean and standard deviation of each metric per row (None when undefined)."""
        out = {}
        for name in self.row_order:
            stats = {}
            for k in METRIC_KEYS:
                vals = [r.metrics[k] for r in self.runs_for(name) if r.metrics[k] is not None]
                stats[k] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)
            out[name] = stats
        return out

    def to_dict(self) -> dict:
        return {"rows": self.row_order, "flags": self.row_flags,
                "runs": [dataclasses.asdict(r) for r in self.runs],
                "summary": {k: {m: list(v) for m, v in s.items()} for k, s in self.summary().items()},
                "extra": self.extra}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def table(self) -> str:
        return format_table(self.summary(), self.row_order)


def _fmt(mean, std, digits):
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def format_table(summary: dict, order: list[str]) -> str:
    header = ["row", "ID switches", "track recall", "mask IoU", "reappearance"]
    lines = [[name,
              _fmt(*summary[name]["id_switches"], 1),
              _fmt(*summary[name]["track_recall"], 3),
              _fmt(*summary[name]["mean_mask_iou"], 3),
              _fmt(*summary[name]["reappearance_success"], 3)] for name in order]
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                              for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(r) for r in lines]) + "\n"


def _timed_inference(model, cfg, videos, n_f):
    t0 = time.perf_counter()
    results = [run_inference(model, cfg, v, n_f) for v in videos]
    frames = sum(v.num_frames for v in videos)
    return results, (time.perf_counter() - t0) / max(frames, 1)


def run_row(row: AblationRow, seed: int, train_videos: list[SyntheticVideo],
            eval_videos: list[SyntheticVideo]) -> RowRun:
    cfg = dataclasses.replace(row.train, seed=seed)
    try:
        t0 = time.perf_counter()
        res = train(cfg, train_videos)
        t_train = time.perf_counter() - t0
        results, per_frame = _timed_inference(res.model, cfg, eval_videos, row.eval_clip_len)
        m = evaluate(results, eval_videos)
    except ClipTrackError as exc:
        raise ClipTrackError(f"ablation row {row.name!r} (seed {seed}) failed with config "
                             f"{json.dumps(cfg.to_dict(), sort_keys=True)}: {exc}") from exc
    bad = sum(len(identity_violations(r)) for r in results)
    return RowRun(row.name, seed, m.as_dict(), t_train, per_frame, res.loss_curve[-1], bad)


def run_ablation(grid: AblationGrid, train_videos: list[SyntheticVideo],
                 eval_videos: list[SyntheticVideo], progress=None) -> AblationReport:
    """Train and evaluate every (row, seed); each run depends only on its own row and seed."""
    grid.validate()
    runs = []
    for row in grid.rows:
        for seed in grid.seeds:
            run = run_row(row, seed, train_videos, eval_videos)
            runs.append(run)
            if progress:
                progress(run)
    return AblationReport(runs, [r.name for r in grid.rows],
                          {r.name: r.flags() for r in grid.rows})


@dataclass
class ClipLengthPoint:
    n_f_eval: int
    metrics: TrackMetrics
    seconds_per_frame: float


def clip_length_sweep(model, cfg: TrainConfig, videos: list[SyntheticVideo],
                      lengths=(1, 3, 5, 7), repeats: int = 3) -> list[ClipLengthPoint]:
    """Evaluate one checkpoint at several inference clip lengths.

    Runtime per frame is the best of ``repeats`` timings, which suppresses
    scheduler noise without hiding systematic differences.
    """
    points = []
    for n_f in lengths:
        best, results = np.inf, None
        for _ in range(repeats):
            t0 = time.perf_counter()
            results = [infer_video(model, v, n_f, cfg.memory_enabled) for v in videos]
            best = min(best, time.perf_counter() - t0)
        frames = sum(v.num_frames for v in videos)
        points.append(ClipLengthPoint(n_f, evaluate(results, videos), best / frames))
    return points


def sweep_table(points: list[ClipLengthPoint]) -> str:
    lines = ["N_f_eval  ID switches  track recall  mask IoU  reappearance  ms/frame"]
    for p in points:
        m = p.metrics
        re = "n/a" if m.reappearance_success is None else f"{m.reappearance_success:.3f}"
        lines.append(f"{p.n_f_eval:>8}  {m.id_switches:>11}  {m.track_recall:>12.3f}  "
                     f"{m.mean_mask_iou:>8.3f}  {re:>12}  {1e3 * p.seconds_per_frame:>8.3f}")
    return "\n".join(lines) + "\n"

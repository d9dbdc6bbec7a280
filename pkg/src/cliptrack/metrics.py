"""Identity-level tracking metrics against synthetic ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import solve_any
from .pipeline import VideoResult
from .synthdata import SyntheticVideo

RECALL_FRAME_FRACTION = 0.5


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def iou_matrix(gts: np.ndarray, outs: np.ndarray) -> np.ndarray:
    """``len(gts) x len(outs)`` IoU between stacks of boolean masks."""
    g = gts.reshape(len(gts), -1).astype(np.float64)
    o = outs.reshape(len(outs), -1).astype(np.float64)
    inter = g @ o.T
    union = g.sum(1)[:, None] + o.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass
class Correspondence:
    # frames[t] = list of (track_id, identity, iou)
    frames: list[list[tuple[int, int, float]]]


def match_output_to_gt(result: VideoResult, gt: SyntheticVideo,
                       iou_threshold: float = 0.5) -> Correspondence:
    if result.num_frames != gt.num_frames or result.grid != gt.grid:
        raise ValueError("result and ground truth have different dimensions")
    frames = []
    for t in range(gt.num_frames):
        outs = result.frame_masks(t)
        vis = gt.visible_tracks(t)
        if not outs or not vis:
            frames.append([])
            continue
        ids = sorted(outs)
        iou = iou_matrix(np.stack([gt.tracks[k].masks[t] for k in vis]),
                         np.stack([outs[i] for i in ids]))
        pairs, _ = solve_any(1.0 - iou)
        frames.append([(vis[r], ids[c], float(iou[r, c])) for r, c in pairs
                       if iou[r, c] >= iou_threshold])
    return Correspondence(frames)


@dataclass
class VideoMetrics:
    id_switches: int
    tracks_recalled: int
    num_tracks: int
    iou_sum: float
    num_instances: int
    reappear_success: int
    reappear_events: int


@dataclass
class TrackMetrics:
    id_switches: int
    track_recall: float
    mean_mask_iou: float
    reappearance_success: float | None
    per_video: list[VideoMetrics] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"id_switches": self.id_switches, "track_recall": self.track_recall,
                "mean_mask_iou": self.mean_mask_iou,
                "reappearance_success": self.reappearance_success}


def video_metrics(corr: Correspondence, gt: SyntheticVideo) -> VideoMetrics:
    by_track: dict[int, dict[int, tuple[int, float]]] = {t.track_id: {} for t in gt.tracks}
    for f, pairs in enumerate(corr.frames):
        for tid, ident, iou in pairs:
            by_track[tid][f] = (ident, iou)
    switches = recalled = instances = 0
    iou_sum = 0.0
    for tr in gt.tracks:
        hits = by_track[tr.track_id]
        prev = None
        for f in sorted(hits):
            ident = hits[f][0]
            if prev is not None and ident != prev:
                switches += 1
            prev = ident
        n_vis = int(tr.visibility.sum())
        instances += n_vis
        iou_sum += sum(i for _, i in hits.values())
        if len(hits) >= RECALL_FRAME_FRACTION * n_vis:
            recalled += 1
    events = gt.reappearance_events()
    ok = 0
    for tid, before, after in events:
        hits = by_track[tid]
        pre = [f for f in hits if f <= before]
        post = [f for f in hits if f >= after]
        if pre and post and hits[max(pre)][0] == hits[min(post)][0]:
            ok += 1
    return VideoMetrics(switches, recalled, len(gt.tracks), iou_sum, instances, ok, len(events))


def aggregate(per_video: list[VideoMetrics]) -> TrackMetrics:
    n_tracks = sum(v.num_tracks for v in per_video)
    n_inst = sum(v.num_instances for v in per_video)
    n_events = sum(v.reappear_events for v in per_video)
    return TrackMetrics(
        id_switches=sum(v.id_switches for v in per_video),
        track_recall=sum(v.tracks_recalled for v in per_video) / n_tracks if n_tracks else 0.0,
        mean_mask_iou=sum(v.iou_sum for v in per_video) / n_inst if n_inst else 0.0,
        reappearance_success=(sum(v.reappear_success for v in per_video) / n_events
                              if n_events else None),
        per_video=per_video,
    )


def compute_metrics(correspondence: Correspondence, gt: SyntheticVideo) -> TrackMetrics:
    """Metrics for a single video (see ``evaluate`` for a dataset)."""
    return aggregate([video_metrics(correspondence, gt)])


def evaluate(results: list[VideoResult], videos: list[SyntheticVideo],
             iou_threshold: float = 0.5) -> TrackMetrics:
    if len(results) != len(videos):
        raise ValueError(f"{len(results)} results for {len(videos)} videos")
    return aggregate([video_metrics(match_output_to_gt(r, v, iou_threshold), v)
                      for r, v in zip(results, videos)])

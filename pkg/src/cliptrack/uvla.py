"""Video-level label assignment with permanent query occupancy.

Per clip, only newborn ground truths are matched; queries already bound to a
track keep that track for the rest of the video, and an additive penalty on
their cost columns keeps newborns away from them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .assignment import hungarian_solve
from .errors import ContractError, InfeasibleError, InvariantError
from .model import ClipPrediction
from .numerics import Tensor
from .synthdata import Clip

DEFAULT_ALPHA = 1e5
OCCLUDED_TARGETS = ("track_class", "no_object")


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    mask: float = 5.0
    dice: float = 5.0


@dataclass
class CostMatrix:
    values: np.ndarray  # K_new x N_q
    row_track_ids: list[int]
    alpha: float = 0.0


@dataclass
class OccupiedSet:
    pairs: dict[int, int] = field(default_factory=dict)  # query index -> track id
    log: list[tuple[int, int, int]] = field(default_factory=list)  # (clip, query, track)

    def __len__(self) -> int:
        return len(self.pairs)

    def tracks(self) -> dict[int, int]:
        return {t: j for j, t in self.pairs.items()}

    def copy(self) -> "OccupiedSet":
        return OccupiedSet(dict(self.pairs), list(self.log))


@dataclass
class Assignment:
    matched: list[tuple[int, int]]  # (track_id, query_index)
    unmatched_queries: list[int]
    direct_matches: list[tuple[int, int]]
    costs: list[float] = field(default_factory=list)

    def query_targets(self) -> dict[int, int]:
        return {j: t for t, j in self.matched + self.direct_matches}


# ---------------------------------------------------------------- costs

def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def pairwise_cost(class_logits: np.ndarray, mask_logits: np.ndarray, classes, masks: np.ndarray,
                  weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """``K x N_q`` cost between targets (classes, flattened masks) and predictions."""
    k = len(classes)
    n_q = class_logits.shape[0]
    if k == 0:
        return np.zeros((0, n_q))
    z = class_logits - class_logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    c_cls = -prob[:, np.asarray(classes)].T
    m = masks.reshape(k, -1).astype(np.float64)
    x = mask_logits.reshape(n_q, -1)
    P = x.shape[1]
    c_bce = _softplus(x).mean(axis=1)[None, :] - (m @ x.T) / P
    s = _sigmoid(x)
    c_dice = 1.0 - (2.0 * (m @ s.T) + 1.0) / (s.sum(axis=1)[None, :] + m.sum(axis=1)[:, None] + 1.0)
    return weights.cls * c_cls + weights.mask * c_bce + weights.dice * c_dice


def match_cost_matrix(pred: ClipPrediction, clip: Clip, track_ids: list[int],
                      weights: MatchWeights = MatchWeights(), b: int = 0,
                      num_occupied: int = 0) -> CostMatrix:
    n_q = pred.class_logits.shape[1]
    if len(track_ids) > n_q - num_occupied:
        raise InfeasibleError(f"{len(track_ids)} newborn objects but only "
                              f"{n_q - num_occupied} free queries")
    for t in track_ids:
        if t not in clip.masks:
            raise ContractError(f"track {t} has no visible frame in clip {clip.clip_index}")
    masks = np.stack([clip.target_mask(t) for t in track_ids]) if track_ids else np.zeros((0, 1))
    values = pairwise_cost(pred.class_logits.data[b], pred.mask_logits.data[b],
                           [clip.classes[t] for t in track_ids], masks, weights)
    return CostMatrix(values, list(track_ids))


def augment_with_occupancy(cost: CostMatrix, omega: OccupiedSet, alpha: float = DEFAULT_ALPHA) -> CostMatrix:
    v = cost.values.copy()
    cols = sorted(omega.pairs)
    if cols and v.size:
        v[:, cols] += alpha
    return CostMatrix(v, list(cost.row_track_ids), alpha)


# ---------------------------------------------------------------- assignment

def uvla_assign(pred: ClipPrediction, clip: Clip, omega: OccupiedSet,
                weights: MatchWeights = MatchWeights(), alpha: float = DEFAULT_ALPHA,
                b: int = 0) -> Assignment:
    n_q = pred.class_logits.shape[1]
    newborn = list(clip.newborn_track_ids)
    occupied_tracks = omega.tracks()
    clash = [t for t in newborn if t in occupied_tracks]
    if clash:
        raise ContractError(f"newborn tracks {clash} are already occupied")
    direct = sorted(((t, j) for j, t in omega.pairs.items()), key=lambda x: x[1])
    cost = match_cost_matrix(pred, clip, newborn, weights, b, num_occupied=len(omega))
    aug = augment_with_occupancy(cost, omega, alpha)
    cols, _ = hungarian_solve(aug.values)
    matched = [(newborn[k], cols[k]) for k in range(len(newborn))]
    used = set(cols) | set(omega.pairs)
    return Assignment(matched, [j for j in range(n_q) if j not in used], direct,
                      [float(cost.values[k, cols[k]]) for k in range(len(newborn))])


def update_occupied(omega: OccupiedSet, assignment: Assignment, clip_index: int) -> OccupiedSet:
    out = omega.copy()
    tracks = out.tracks()
    for t, j in assignment.matched:
        if j in out.pairs or t in tracks:
            raise InvariantError(f"occupancy collision: query {j} / track {t} already bound")
        out.pairs[j] = t
        tracks[t] = j
        out.log.append((clip_index, j, t))
    return out


def correspondence_assign(pred: ClipPrediction, clip: Clip, carried: dict[int, int],
                          weights: MatchWeights = MatchWeights(), b: int = 0) -> Assignment:
    """Pairing used by the correspondence-learning baselines.

    Tracks visible here that were paired in the previous clip (``carried``:
    track -> query) keep their query; every other visible track is matched
    by plain Hungarian over the queries not taken by carried pairs.
    """
    n_q = pred.class_logits.shape[1]
    visible = sorted(clip.masks)
    direct = sorted(((t, carried[t]) for t in visible if t in carried), key=lambda x: x[1])
    rest = [t for t in visible if t not in carried]
    taken = {j for _, j in direct}
    free = [j for j in range(n_q) if j not in taken]
    if len(rest) > len(free):
        raise InfeasibleError(f"{len(rest)} unpaired objects but only {len(free)} free queries")
    cost = match_cost_matrix(pred, clip, rest, weights, b)
    sub = cost.values[:, free] if rest else np.zeros((0, len(free)))
    cols, _ = hungarian_solve(sub)
    matched = [(rest[k], free[c]) for k, c in enumerate(cols)]
    used = taken | {j for _, j in matched}
    return Assignment(matched, [j for j in range(n_q) if j not in used], direct,
                      [float(sub[k, c]) for k, c in enumerate(cols)])


# ---------------------------------------------------------------- losses

@dataclass
class Targets:
    classes: np.ndarray  # N_q ints, C means no object
    class_weights: np.ndarray  # N_q
    masks: np.ndarray  # N_q x P
    mask_weights: np.ndarray  # N_q


def build_targets(assignment: Assignment, clip: Clip, num_queries: int, num_classes: int,
                  no_object_weight: float = 0.1, occluded_class_target: str = "track_class",
                  supervise_hidden_masks: bool = True) -> Targets:
    if occluded_class_target not in OCCLUDED_TARGETS:
        raise ValueError(f"occluded_class_target must be one of {OCCLUDED_TARGETS}")
    G = clip.features.shape[1]
    P = clip.length * G * G
    cls = np.full(num_queries, num_classes, dtype=np.int64)
    cw = np.full(num_queries, no_object_weight)
    masks = np.zeros((num_queries, P))
    mw = np.zeros(num_queries)
    for t, j in assignment.matched:
        cls[j], cw[j] = clip.classes[t], 1.0
        masks[j] = clip.target_mask(t).reshape(-1)
        mw[j] = 1.0
    for t, j in assignment.direct_matches:
        if t in clip.masks:
            cls[j], cw[j] = clip.classes[t], 1.0
            masks[j] = clip.masks[t].reshape(-1)
            mw[j] = 1.0
        else:
            if occluded_class_target == "track_class":
                cls[j], cw[j] = clip.classes[t], 1.0
            mw[j] = 1.0 if supervise_hidden_masks else 0.0
    return Targets(cls, cw, masks, mw)


def compute_losses(pred: ClipPrediction, targets: list[Targets],
                   weights: MatchWeights = MatchWeights()) -> Tensor:
    """Weighted class cross-entropy plus BCE and dice on supervised masks.

    ``targets`` holds one entry per batch element of ``pred``.
    """
    n_cls = pred.class_logits.shape[-1]
    onehot = np.stack([np.eye(n_cls)[t.classes] * t.class_weights[:, None] for t in targets])
    logp = nx.log_softmax(pred.class_logits)
    ce = nx.scale(nx.sum_(nx.mul(logp, onehot)), -1.0 / onehot.sum())
    mt = np.stack([t.masks for t in targets])
    mw = np.stack([t.mask_weights for t in targets])
    per_row = nx.add(nx.scale(nx.sigmoid_bce_rows(pred.mask_logits, mt), weights.mask),
                     nx.scale(nx.dice_rows(pred.mask_logits, mt), weights.dice))
    mask_loss = nx.scale(nx.sum_(nx.mul(per_row, mw)), 1.0 / max(mw.sum(), 1.0))
    return nx.add(nx.scale(ce, weights.cls), mask_loss)


# ---------------------------------------------------------------- traces

def trace_record(clip_index: int, before: OccupiedSet, after: OccupiedSet,
                 assignment: Assignment) -> str:
    rec = {
        "clip": clip_index,
        "omega_before": sorted(before.pairs.items()),
        "omega_after": sorted(after.pairs.items()),
        "matched": assignment.matched,
        "direct": assignment.direct_matches,
        "no_object": assignment.unmatched_queries,
        "costs": [round(c, 9) for c in assignment.costs],
    }
    return json.dumps(rec, sort_keys=True)

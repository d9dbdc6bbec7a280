"""Oracle suites that gate a release: solver, gradients, label assignment, memory locality."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .assignment import brute_force_assignment, hungarian_solve
from .model import ClipModel, ClipPrediction, ModelConfig, PrototypeMemory
from .numerics import Tensor
from .pipeline import TrainConfig, sequence_loss
from .synthdata import ScenarioConfig, generate_video, split_clips
from .uvla import OccupiedSet, augment_with_occupancy, match_cost_matrix, update_occupied, uvla_assign


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class SelfCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def matrix(self) -> str:
        w = max(len(r.name) for r in self.results)
        lines = [f"{r.name.ljust(w)}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:6.2f}s  {r.detail}"
                 for r in self.results]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- solver

def solver_mismatches(solver: Callable = hungarian_solve, per_shape: int = 1000, max_n: int = 7,
                      seed: int = 0, tol: float = 1e-9) -> tuple[int, int]:
    """Compare ``solver`` with exhaustive search on random K x N matrices, K <= N <= max_n.

    Returns ``(mismatches, cases)``; a case mismatches if the cost differs by
    more than ``tol`` or the tie-broken columns differ.
    """
    rng = np.random.default_rng(seed)
    bad = cases = 0
    for n in range(1, max_n + 1):
        for k in range(1, n + 1):
            for _ in range(per_shape):
                c = rng.uniform(-100.0, 100.0, (k, n))
                cols, total = solver(c)
                bcols, btotal = brute_force_assignment(c)
                cases += 1
                if list(cols) != bcols or abs(total - btotal) > tol:
                    bad += 1
    return bad, cases


# ---------------------------------------------------------------- assignment invariants

def _random_prediction(rng, n_q: int, n_c: int, clip) -> ClipPrediction:
    g = clip.features.shape[1]
    return ClipPrediction(Tensor(rng.standard_normal((1, n_q, n_c + 1))),
                          Tensor(rng.standard_normal((1, n_q, clip.length * g * g))), clip.length, g)


def assignment_violations(num_videos: int = 200, seed: int = 0, clip_lengths=(1, 3),
                          scenario: ScenarioConfig | None = None) -> tuple[list[str], int]:
    """Run the occupancy-aware assignment over whole random videos and list contract breaches.

    Checked per clip: the occupied map only grows and stays one-to-one; no
    newborn lands on an occupied query while a free one exists; matched,
    direct and no-object queries account for every query; and the penalized
    optimum equals exhaustive search restricted to the free columns.
    Returns ``(violations, clips_checked)``.
    """
    sc = scenario or ScenarioConfig(occlusion_prob=0.4, reappear_prob=0.6, birth_prob=0.8)
    rng = np.random.default_rng([seed, 11])
    out: list[str] = []
    clips_checked = 0
    for v in range(num_videos):
        video = generate_video(sc, int(rng.integers(2**31)))
        n_f = clip_lengths[v % len(clip_lengths)]
        omega = OccupiedSet()
        for i, clip in enumerate(split_clips(video, n_f)):
            tag = f"video {v} clip {i}"
            pred = _random_prediction(rng, sc.num_queries, sc.num_classes, clip)
            a = uvla_assign(pred, clip, omega)
            new = update_occupied(omega, a, i)
            clips_checked += 1
            if not omega.pairs.items() <= new.pairs.items():
                out.append(f"{tag}: occupied map shrank or changed")
            if len(set(new.pairs.values())) != len(new.pairs):
                out.append(f"{tag}: a track is bound to two queries")
            free = [j for j in range(sc.num_queries) if j not in omega.pairs]
            used = {j for _, j in a.matched}
            if used & set(omega.pairs) and len(free) >= len(a.matched):
                out.append(f"{tag}: newborn matched to an occupied query")
            if len(a.matched) + len(a.direct_matches) + len(a.unmatched_queries) != sc.num_queries:
                out.append(f"{tag}: query count identity broken")
            if sorted(a.direct_matches) != sorted((t, j) for j, t in omega.pairs.items()):
                out.append(f"{tag}: occupied queries not carried as direct matches")
            newborn = list(clip.newborn_track_ids)
            if newborn:
                raw = match_cost_matrix(pred, clip, newborn, num_occupied=len(omega))
                aug = augment_with_occupancy(raw, omega).values
                cols, _ = hungarian_solve(aug)
                bcols, best = brute_force_assignment(raw.values[:, free])
                got = float(sum(raw.values[r, cols[r]] for r in range(len(newborn))))
                if [free[c] for c in bcols] != cols or abs(got - best) > 1e-9:
                    out.append(f"{tag}: penalized optimum differs from restricted search")
                if [j for _, j in a.matched] != cols:
                    out.append(f"{tag}: assignment disagrees with the penalized solve")
            omega = new
    return out, clips_checked


# ---------------------------------------------------------------- gradients

def end_to_end_grad_error(samples: int = 200, seed: int = 0) -> float:
    """Max relative error of the taped gradient of a two-clip training loss."""
    sc = ScenarioConfig(dim=8, num_queries=4, num_frame_queries=4, max_objects=2, grid=8,
                        size_max=2, num_frames_min=6, num_frames_max=6, reappear_prob=0.5)
    tc = TrainConfig(n_v_train=2, n_f_train=2, dim=8, num_queries=4, ffn_dim=16, seed=seed)
    model = ClipModel(tc.model_config())
    clips = [split_clips(generate_video(sc, s), 2)[:2] for s in (seed, seed + 1)]
    _, frozen = sequence_loss(model, tc, clips)
    rep = nx.grad_check(lambda: sequence_loss(model, tc, clips, frozen)[0], model.params,
                        samples=samples, seed=seed)
    return rep.max_rel_error


def op_grad_errors(samples: int = 40, seed: int = 0) -> dict[str, float]:
    """Finite-difference errors of the individual differentiable operations."""
    rng = np.random.default_rng(seed)
    store = nx.ParamStore()
    a = store.add("a", rng.standard_normal((3, 4)))
    b = store.add("b", rng.standard_normal((4, 5)))
    g = store.add("g", rng.standard_normal(4) + 1.0)
    t = (rng.random((3, 4)) > 0.5).astype(float)
    w = rng.standard_normal((3, 5))
    fns = {
        "matmul": lambda: nx.sum_(nx.mul(a @ b, w)),
        "softmax": lambda: nx.sum_(nx.mul(nx.softmax_rows(a @ b), w)),
        "log_softmax": lambda: nx.sum_(nx.mul(nx.log_softmax(a @ b), w)),
        "layer_norm": lambda: nx.sum_(nx.mul(nx.layer_norm(a, g, store["g"]) @ b, w)),
        "relu": lambda: nx.sum_(nx.mul(nx.relu(a @ b), w)),
        "bce": lambda: nx.sum_(nx.sigmoid_bce_rows(a, t)),
        "dice": lambda: nx.sum_(nx.dice_rows(a, t)),
    }
    return {name: nx.grad_check(f, store, samples=samples, seed=seed).max_rel_error
            for name, f in fns.items()}


# ---------------------------------------------------------------- memory locality

def memory_locality(seed: int = 0) -> tuple[bool, bool]:
    """``(index_wise_exact, global_sensitive)`` under a perturbation of one stored index."""
    cfg = ModelConfig(init_seed=seed)
    model = ClipModel(cfg)
    rng = np.random.default_rng(seed)
    q = Tensor(rng.standard_normal((1, cfg.num_queries, cfg.dim)))
    entries = [rng.standard_normal((1, cfg.num_queries, cfg.dim)) for _ in range(3)]
    j_moved = 1

    def read(mode, bump):
        mem = PrototypeMemory()
        for e in entries:
            e = e.copy()
            if bump:
                e[0, j_moved] += rng.standard_normal(cfg.dim)
            mem.append(Tensor(e))
        return model.memory_readout(q, mem, mode).data[0]

    others = [j for j in range(cfg.num_queries) if j != j_moved]
    iw = read("index_wise", False), read("index_wise", True)
    gl = read("global", False), read("global", True)
    exact = all(np.array_equal(iw[0][j], iw[1][j]) for j in others)
    sensitive = all(not np.array_equal(gl[0][j], gl[1][j]) for j in others)
    return exact, sensitive


# ---------------------------------------------------------------- driver

def run_selfcheck(solver: Callable = hungarian_solve, quick: bool = False) -> SelfCheckReport:
    report = SelfCheckReport()

    def timed(name, fn):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        report.results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))

    def solver_check():
        bad, n = solver_mismatches(solver, per_shape=100 if quick else 1000)
        return bad == 0, f"{bad} mismatches in {n} cases"

    def uvla_check():
        bad, n = assignment_violations(num_videos=30 if quick else 200)
        return not bad, f"{len(bad)} violations over {n} clips" + (f"; first: {bad[0]}" if bad else "")

    def op_grads():
        errs = op_grad_errors()
        worst = max(errs, key=errs.get)
        return errs[worst] < 1e-4, f"worst {worst} rel err {errs[worst]:.2e}"

    def e2e_grad():
        err = end_to_end_grad_error(samples=60 if quick else 200)
        return err < 1e-4, f"max rel err {err:.2e}"

    def locality():
        exact, sensitive = memory_locality()
        return exact and sensitive, f"index_wise exact={exact}, global sensitive={sensitive}"

    timed("hungarian_vs_bruteforce", solver_check)
    timed("assignment_invariants", uvla_check)
    timed("op_gradients", op_grads)
    timed("end_to_end_gradient", e2e_grad)
    timed("memory_locality", locality)
    return report

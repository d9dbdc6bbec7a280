import json

import numpy as np
import pytest

from cliptrack import numerics as nx
from cliptrack.assignment import brute_force_assignment, hungarian_solve
from cliptrack.errors import ContractError, InfeasibleError, InvariantError
from cliptrack.model import ClipModel, ClipPrediction
from cliptrack.numerics import Tensor
from cliptrack.pipeline import TrainConfig, sequence_loss
from cliptrack.synthdata import Clip, ScenarioConfig, generate_video, split_clips
from cliptrack.uvla import (Assignment, CostMatrix, OccupiedSet, augment_with_occupancy,
                            build_targets, compute_losses, correspondence_assign,
                            match_cost_matrix, pairwise_cost, trace_record, update_occupied,
                            uvla_assign)


def make_clip(masks: dict, classes: dict, newborn, grid=2, length=1, index=0):
    return Clip(index, 0, length, np.zeros((length, 3, 4)), np.zeros((length, grid, grid, 4)),
                {t: np.asarray(m, dtype=bool).reshape(length, grid, grid) for t, m in masks.items()},
                classes, list(newborn))


def make_pred(class_logits, mask_logits, grid=2, length=1):
    return ClipPrediction(Tensor(np.asarray(class_logits, float)[None]),
                          Tensor(np.asarray(mask_logits, float)[None]), length, grid)


def test_cost_of_perfect_prediction():
    mask = np.array([1, 0, 0, 1], dtype=bool)
    logits = np.where(mask, 60.0, -60.0)
    c = pairwise_cost(np.array([[0.0, 80.0, 0.0]]), logits[None], [1], mask[None])
    assert c.shape == (1, 1)
    assert c[0, 0] == pytest.approx(-2.0, abs=1e-12)


def test_cost_closed_form_uniform_prediction():
    c = pairwise_cost(np.zeros((3, 5)), np.zeros((3, 4)), [2, 0], np.zeros((2, 4), dtype=bool))
    # class: -1/5; bce: log 2 per cell; dice: 1 - 1/(0.5*4 + 0 + 1)
    expected = 2.0 * (-0.2) + 5.0 * np.log(2.0) + 5.0 * (1.0 - 1.0 / 3.0)
    assert c.shape == (2, 3)
    np.testing.assert_allclose(c, expected, atol=1e-12)


def test_empty_omega_changes_nothing():
    cm = CostMatrix(np.arange(6.0).reshape(2, 3), [0, 1])
    np.testing.assert_array_equal(augment_with_occupancy(cm, OccupiedSet()).values, cm.values)


def test_alpha_column_example():
    cm = CostMatrix(np.array([[0.5, 0.1], [0.3, 0.9]]), [4, 5])
    out = augment_with_occupancy(cm, OccupiedSet({1: 9}))
    np.testing.assert_allclose(out.values[:, 1], [100000.1, 100000.9])
    np.testing.assert_array_equal(out.values[:, 0], [0.5, 0.3])


def test_penalty_sufficiency_against_restricted_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        occ = sorted(rng.choice(n, int(rng.integers(0, n)), replace=False).tolist())
        free = [j for j in range(n) if j not in occ]
        k = int(rng.integers(0, len(free) + 1))
        c = rng.uniform(-100, 100, (k, n))
        aug = augment_with_occupancy(CostMatrix(c, list(range(k))),
                                     OccupiedSet({j: 100 + j for j in occ})).values
        cols, _ = hungarian_solve(aug)
        assert not set(cols) & set(occ)
        sub_cols, best = brute_force_assignment(c[:, free])
        assert [free[x] for x in sub_cols] == cols
        assert sum(c[r, cols[r]] for r in range(k)) == pytest.approx(best, abs=1e-9)


def test_no_newborn_no_omega_all_no_object():
    clip = make_clip({}, {}, [])
    a = uvla_assign(make_pred(np.zeros((4, 3)), np.zeros((4, 4))), clip, OccupiedSet())
    assert a.matched == [] and a.direct_matches == [] and a.unmatched_queries == [0, 1, 2, 3]


def test_newborn_avoids_occupied_query():
    clip = make_clip({3: [1, 0, 0, 0]}, {3: 0, 7: 1}, [3])
    # query 2 would be the unconstrained best match
    cl = np.zeros((4, 3))
    cl[2, 0] = 10.0
    ml = np.full((4, 4), -5.0)
    ml[2, 0] = 5.0
    a = uvla_assign(make_pred(cl, ml), clip, OccupiedSet({2: 7}))
    assert a.matched[0][0] == 3 and a.matched[0][1] != 2
    assert a.direct_matches == [(7, 2)]
    cost = match_cost_matrix(make_pred(cl, ml), clip, [3]).values[0]
    free = [0, 1, 3]
    assert a.matched[0][1] == free[int(np.argmin(cost[free]))]


def test_update_occupied_bookkeeping():
    omega = update_occupied(OccupiedSet(), Assignment([(3, 5)], [], []), 0)
    assert omega.pairs == {5: 3} and omega.log == [(0, 5, 3)]
    assert update_occupied(omega, Assignment([], [0], [(3, 5)]), 1).pairs == {5: 3}
    with pytest.raises(InvariantError):
        update_occupied(omega, Assignment([(4, 5)], [], []), 1)
    with pytest.raises(InvariantError):
        update_occupied(omega, Assignment([(3, 1)], [], []), 1)


def test_newborn_already_occupied_rejected():
    clip = make_clip({3: [1, 0, 0, 0]}, {3: 0}, [3])
    with pytest.raises(ContractError):
        uvla_assign(make_pred(np.zeros((4, 3)), np.zeros((4, 4))), clip, OccupiedSet({1: 3}))


def test_too_many_newborns():
    clip = make_clip({t: [1, 0, 0, 0] for t in range(3)}, {0: 0, 1: 0, 2: 0}, [0, 1, 2])
    with pytest.raises(InfeasibleError):
        uvla_assign(make_pred(np.zeros((4, 3)), np.zeros((4, 4))), clip, OccupiedSet({0: 8, 1: 9}))


def _random_pred(rng, n_q, n_c, clip):
    p = clip.length * clip.features.shape[1] ** 2
    return make_pred(rng.standard_normal((n_q, n_c + 1)), rng.standard_normal((n_q, p)),
                     clip.features.shape[1], clip.length)


@pytest.mark.parametrize("n_f", [1, 3])
def test_random_video_invariants(n_f):
    cfg = ScenarioConfig(occlusion_prob=0.5, reappear_prob=0.6, birth_prob=0.8)
    rng = np.random.default_rng(n_f)
    for seed in range(40):
        v = generate_video(cfg, seed)
        omega = OccupiedSet()
        born = 0
        for i, clip in enumerate(split_clips(v, n_f, with_features=True)):
            a = uvla_assign(_random_pred(rng, 8, 4, clip), clip, omega)
            assert len(a.matched) + len(a.direct_matches) + len(a.unmatched_queries) == 8
            assert not {j for _, j in a.matched} & set(omega.pairs)
            assert sorted(a.direct_matches) == sorted((t, j) for j, t in omega.pairs.items())
            new = update_occupied(omega, a, i)
            assert omega.pairs.items() <= new.pairs.items()
            assert len(set(new.pairs.values())) == len(new.pairs)
            born += len(clip.newborn_track_ids)
            assert len(new) == born
            omega = new


def test_targets_for_occluded_direct_match():
    clip = make_clip({1: [1, 1, 0, 0]}, {1: 2, 5: 3}, [])
    a = Assignment([], [0, 3], [(1, 1), (5, 2)])
    t = build_targets(a, clip, 4, 4)
    assert t.classes.tolist() == [4, 2, 3, 4]
    assert t.class_weights.tolist() == [0.1, 1.0, 1.0, 0.1]
    assert t.masks[1].tolist() == [1, 1, 0, 0] and not t.masks[2].any()
    assert t.mask_weights.tolist() == [0, 1, 1, 0]
    t2 = build_targets(a, clip, 4, 4, occluded_class_target="no_object", supervise_hidden_masks=False)
    assert t2.classes.tolist() == [4, 2, 4, 4] and t2.mask_weights.tolist() == [0, 1, 0, 0]


def test_perfect_prediction_loss_near_zero():
    clip = make_clip({1: [1, 0, 0, 1]}, {1: 2}, [1])
    a = Assignment([(1, 0)], [1, 2], [])
    t = build_targets(a, clip, 3, 3)
    cl = np.full((3, 4), -40.0)
    cl[0, 2] = 40.0
    cl[1:, 3] = 40.0
    ml = np.full((3, 4), -40.0)
    ml[0] = [40.0, -40.0, -40.0, 40.0]
    loss = compute_losses(make_pred(cl, ml), [t]).item()
    assert 0.0 <= loss < 1e-6


def test_random_loss_positive_and_finite():
    rng = np.random.default_rng(0)
    v = generate_video(ScenarioConfig(), 2)
    clip = split_clips(v, 2)[0]
    pred = _random_pred(rng, 8, 4, clip)
    a = uvla_assign(pred, clip, OccupiedSet())
    loss = compute_losses(pred, [build_targets(a, clip, 8, 4)]).item()
    assert np.isfinite(loss) and loss > 0


def _small_setup(n_v=2):
    sc = ScenarioConfig(dim=8, num_queries=4, num_frame_queries=4, max_objects=2, grid=8,
                        size_max=2, num_frames_min=6, num_frames_max=6, reappear_prob=0.5)
    tc = TrainConfig(n_v_train=n_v, n_f_train=2, dim=8, num_queries=4, ffn_dim=16)
    model = ClipModel(tc.model_config())
    clips = [split_clips(generate_video(sc, s), 2)[:n_v] for s in (0, 1)]
    return tc, model, clips


def test_end_to_end_gradient():
    tc, model, clips = _small_setup()
    _, frozen = sequence_loss(model, tc, clips)
    rep = nx.grad_check(lambda: sequence_loss(model, tc, clips, frozen)[0], model.params,
                        samples=200, seed=1)
    assert rep.max_rel_error < 1e-4


def test_two_clip_uvla_matches_correspondence_when_all_tracks_persist():
    # every track is born in clip 0 and visible in clip 1: both schemes pair identically
    cfg = ScenarioConfig(num_frames_min=4, num_frames_max=4, birth_prob=0.0, occlusion_prob=0.0,
                         reappear_prob=0.0)
    rng = np.random.default_rng(5)
    for seed in range(20):
        v = generate_video(cfg, seed)
        c0, c1 = split_clips(v, 2)
        p0, p1 = _random_pred(rng, 8, 4, c0), _random_pred(rng, 8, 4, c1)
        u0 = uvla_assign(p0, c0, OccupiedSet())
        omega = update_occupied(OccupiedSet(), u0, 0)
        u1 = uvla_assign(p1, c1, omega)
        k0 = correspondence_assign(p0, c0, {})
        k1 = correspondence_assign(p1, c1, {t: j for t, j in k0.matched})
        assert sorted(u0.matched) == sorted(k0.matched)
        assert sorted(u1.direct_matches) == sorted(k1.direct_matches)
        assert u1.matched == k1.matched == []


def test_trace_record_is_json():
    a = Assignment([(3, 1)], [0, 2], [], [0.25])
    rec = json.loads(trace_record(0, OccupiedSet(), OccupiedSet({1: 3}), a))
    assert rec["omega_after"] == [[1, 3]] and rec["no_object"] == [0, 2]

import dataclasses

import numpy as np
import pytest

from cliptrack import numerics as nx
from cliptrack.errors import ConfigError
from cliptrack.model import (ClipChain, ClipModel, ModelConfig, PrototypeMemory, PrototypeSet,
                             QuerySet, propagate_queries)
from cliptrack.numerics import Tensor
from cliptrack.synthdata import ScenarioConfig, generate_video, split_clips

CFG = ModelConfig(dim=8, num_queries=4, num_classes=3, ffn_dim=16)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def zero_paths(model: ClipModel, prefixes):
    for path, p in model.params.items():
        if any(path.startswith(pre) for pre in prefixes) and path.rsplit(".", 1)[1] in (
                "wv", "wo", "bo", "w2", "b2"):
            p.data[...] = 0.0


def test_encoder_without_layers_is_identity():
    m = ClipModel(dataclasses.replace(CFG, enc_layers=0))
    x = rand((2, 6, 8))
    np.testing.assert_array_equal(m.encode_objects(x).data, x)


@pytest.mark.parametrize("n_tokens", [1, 5, 21])
def test_encoder_shape(n_tokens):
    m = ClipModel(CFG)
    assert m.encode_objects(rand((1, n_tokens, 8))).shape == (1, n_tokens, 8)


def test_encoder_permutation_equivariance():
    m = ClipModel(CFG)
    x = rand((1, 7, 8), 3)
    perm = np.random.default_rng(1).permutation(7)
    np.testing.assert_allclose(m.encode_objects(x[:, perm]).data, m.encode_objects(x).data[:, perm],
                               atol=1e-12)


def test_decoder_residual_path_with_zeroed_outputs():
    m = ClipModel(CFG)
    zero_paths(m, ["dec."])
    q = m.initial_queries(2)
    p = m.decode_prototypes(q, Tensor(rand((2, 5, 8))))
    np.testing.assert_array_equal(p.embeddings.data, q.embeddings.data)


@pytest.mark.parametrize("n_tokens", [3, 12])
def test_decoder_shape_and_determinism(n_tokens):
    m = ClipModel(CFG)
    enc = Tensor(rand((1, n_tokens, 8)))
    a = m.decode_prototypes(m.initial_queries(1), enc).embeddings.data
    b = m.decode_prototypes(m.initial_queries(1), enc).embeddings.data
    assert a.shape == (1, 4, 8)
    np.testing.assert_array_equal(a, b)


def test_decoder_rejects_wrong_query_count():
    m = ClipModel(CFG)
    with pytest.raises(ConfigError):
        m.decode_prototypes(QuerySet(Tensor(rand((1, 3, 8))), 0), Tensor(rand((1, 2, 8))))


def test_zero_prototype_gives_uniform_classes():
    m = ClipModel(CFG)
    for path in ("head.cls.b", "head.mask.b", "head.mask.bias"):
        m.params[path].data[...] = 0.0
    pred = m.predict_heads(PrototypeSet(Tensor(np.zeros((1, 4, 8))), 0), rand((1, 2, 5, 5, 8)))
    np.testing.assert_array_equal(pred.class_logits.data, 0.0)
    assert pred.mask_grid(0).shape == (4, 2, 5, 5)


def test_identity_projection_highlights_own_cells():
    sc = ScenarioConfig(num_frames_min=4, num_frames_max=4, min_objects=1, max_objects=1, dim=8,
                        num_queries=4, num_frame_queries=4, feature_noise=0.0, query_noise=0.0)
    v = generate_video(sc, 0)
    m = ClipModel(CFG)
    m.params["head.mask.w"].data[...] = np.eye(8)
    m.params["head.mask.b"].data[...] = 0.0
    m.params["head.mask.bias"].data[...] = 0.0
    proto = np.zeros((1, 4, 8))
    proto[0, 0] = v.tracks[0].identity
    feats = v.frame_feature_maps[None]
    logits = m.predict_heads(PrototypeSet(Tensor(proto), 0), feats).mask_grid(0)[0]
    own = v.tracks[0].masks
    assert logits[own].min() > logits[~own].max()


def test_empty_memory_reads_zero():
    m = ClipModel(CFG)
    q = Tensor(rand((1, 4, 8)))
    for mode in ("index_wise", "global"):
        np.testing.assert_array_equal(m.memory_readout(q, PrototypeMemory(), mode).data, 0.0)


def test_single_entry_identity_projections():
    m = ClipModel(CFG)
    m.params["mem.wv"].data[...] = np.eye(8)
    m.params["mem.wo"].data[...] = np.eye(8)
    p1 = Tensor(rand((1, 4, 8), 5))
    mem = PrototypeMemory()
    mem.append(p1)
    z = m.memory_readout(Tensor(rand((1, 4, 8), 6)), mem, "index_wise")
    np.testing.assert_allclose(z.data, p1.data, atol=1e-14)


def _memory(seed, n=3, bump=None):
    mem = PrototypeMemory()
    for k in range(n):
        e = rand((1, 4, 8), seed + k)
        if bump is not None:
            e[0, bump] += 1.0
        mem.append(Tensor(e))
    return mem


def test_index_wise_locality_is_exact():
    m = ClipModel(CFG)
    q = Tensor(rand((1, 4, 8), 9))
    base = m.memory_readout(q, _memory(20), "index_wise").data
    moved = m.memory_readout(q, _memory(20, bump=2), "index_wise").data
    for j in (0, 1, 3):
        assert np.array_equal(base[0, j], moved[0, j])
    assert not np.array_equal(base[0, 2], moved[0, 2])
    g0 = m.memory_readout(q, _memory(20), "global").data
    g1 = m.memory_readout(q, _memory(20, bump=2), "global").data
    assert not np.array_equal(g0[0, 0], g1[0, 0])


def test_memory_capacity_evicts_oldest():
    mem = PrototypeMemory(capacity=2)
    for k in range(3):
        mem.append(Tensor(np.full((1, 4, 8), float(k))))
    assert len(mem) == 2 and mem.history(0)[0, 0] == 1.0


def test_propagation_is_additive():
    p = PrototypeSet(Tensor(rand((1, 4, 8), 1)), 3)
    z1, z2 = rand((1, 4, 8), 2), rand((1, 4, 8), 3)
    q0 = propagate_queries(p, Tensor(np.zeros((1, 4, 8))))
    np.testing.assert_array_equal(q0.embeddings.data, p.embeddings.data)
    assert q0.clip_index == 4
    lhs = propagate_queries(p, Tensor(z1 + z2)).embeddings.data
    rhs = propagate_queries(p, Tensor(z1)).embeddings.data + z2
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def _clips():
    sc = ScenarioConfig(dim=8, num_queries=4, num_frame_queries=4, max_objects=3)
    return split_clips(generate_video(sc, 1), 2)[:3]


def test_disabled_memory_equals_zero_readout():
    m = ClipModel(CFG)
    a = ClipChain(m, 1, memory_enabled=False)
    for clip in _clips():
        p, _ = a.step(clip.frame_queries[None], clip.features[None])
        np.testing.assert_array_equal(a.queries.embeddings.data, p.embeddings.data)


def test_null_model_is_identity_on_queries():
    m = ClipModel(dataclasses.replace(CFG, enc_layers=0, dec_layers=0))
    chain = ClipChain(m, 1, memory_enabled=False)
    q0 = chain.queries.embeddings.data.copy()
    for clip in _clips():
        p, _ = chain.step(clip.frame_queries[None], clip.features[None])
        np.testing.assert_array_equal(p.embeddings.data[0], q0[0])


def test_chain_preserves_query_index():
    # a query's trajectory depends only on its own index when cross-query paths are cut
    m = ClipModel(CFG)
    zero_paths(m, ["dec.0.self", "dec.1.self", "mem."])
    clips = _clips()
    base = ClipChain(m, 1)
    for c in clips:
        pb, _ = base.step(c.frame_queries[None], c.features[None])
    m.params["queries.init"].data[1] += 0.5
    moved = ClipChain(m, 1)
    for c in clips:
        pm, _ = moved.step(c.frame_queries[None], c.features[None])
    diff = np.abs(pb.embeddings.data - pm.embeddings.data)[0].sum(axis=1)
    assert diff[1] > 0 and np.all(diff[[0, 2, 3]] == 0)


def test_chain_gradient_two_clips():
    m = ClipModel(CFG)
    clips = _clips()[:2]

    def loss():
        chain = ClipChain(m, 1)
        total = None
        for c in clips:
            _, pred = chain.step(c.frame_queries[None], c.features[None])
            term = nx.sum_(pred.class_logits * pred.class_logits) + nx.mean(pred.mask_logits)
            total = term if total is None else total + term
        return total

    rep = nx.grad_check(loss, m.params, samples=120, seed=4)
    assert rep.max_rel_error < 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(memory_mode="nearest").validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dim": 8, "heads": 2})
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


def test_multi_head_attention():
    with pytest.raises(ConfigError):
        ModelConfig(dim=8, num_heads=3).validate()
    model = ClipModel(dataclasses.replace(CFG, num_heads=2))
    tokens = rand((2, 5, 8), seed=4)

    def loss():
        p = model.decode_prototypes(model.initial_queries(2), model.encode_objects(tokens))
        return nx.sum_(nx.mul(p.embeddings, p.embeddings))

    assert nx.grad_check(loss, model.params, samples=60, seed=1).max_rel_error < 1e-4
    single = ClipModel(CFG, model.params)
    assert not np.allclose(single.encode_objects(tokens).data, model.encode_objects(tokens).data)

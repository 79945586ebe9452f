import math

import numpy as np
import pytest

from helpers import identity_setup
from metasn.corpus import synth_corpus
from metasn.encoder import Encoder, EncoderConfig, init_params
from metasn.numerics import autodiff as ad
from metasn.numerics import finite_diff_gradient, max_relative_error
from metasn.sampler import sample_episode
from metasn.trainer import (
    SamplePair,
    TrainConfig,
    TrainingError,
    TrainState,
    adapt,
    adam_update,
    build_pairs,
    compute_weights,
    contrastive_loss,
    inner_update,
    meta_gradient,
    meta_step,
    predict_indices,
    proto_baseline_config,
    query_loss,
    support_weights,
    task_gradient,
    train,
)


def _tiny(seed=0, n_classes=6, docs=8):
    ds, table = synth_corpus(n_classes, docs, 6, 4, 0.0, 6, seed=seed, split_counts=(n_classes, 0, 0))
    cfg = EncoderConfig(filter_widths=(1, 2), maps_per_width=3, d_fc=4)
    enc = Encoder(table, cfg)
    params = init_params(cfg, 6, np.random.default_rng(seed))
    return ds, enc, params


@pytest.mark.parametrize("n,k,total,pos", [(3, 2, 21, 6), (2, 1, 5, 2)])
def test_pair_counts(n, k, total, pos):
    ds, _, _ = _tiny()
    ep = sample_episode(ds, "train", n, k, 1, "uniform", np.random.default_rng(0))
    pairs = build_pairs(ep, ds.classes)
    assert len(pairs) == total
    assert sum(p.y for p in pairs) == pos
    pp = [p for p in pairs if p.kind == "proto_proto"]
    assert len(pp) == n * (n - 1) // 2
    assert all(p.y == 0 and p.left.class_id != p.right.class_id for p in pp)
    for d in ep.support_docs():
        assert sum(1 for p in pairs if p.left is d) == n


def test_support_weights_examples():
    # two classes, one support each, one query each; supports at mean query distance 0 and ln 4
    a = math.log(4)
    enc, params, classes, ep = identity_setup(
        [[5.0, 5.0], [9.0, 9.0]],
        [[[0.0, 0.0]], [[a, 0.0]]],
        [[[0.0, 0.0]], [[0.0, 0.0]]],
    )
    w = support_weights(ep, params, enc)
    assert np.allclose(w, [0.8, 0.2], atol=1e-15)
    # equidistant supports -> uniform
    enc, params, classes, ep = identity_setup(
        [[5.0, 5.0], [9.0, 9.0]],
        [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 0.0]]],
        [[[0.5, 0.5]], [[0.5, 0.5]]],
    )
    assert np.allclose(support_weights(ep, params, enc), 0.25, atol=1e-15)


def test_weights_attach_and_ew():
    ds, enc, params = _tiny()
    ep = sample_episode(ds, "train", 3, 2, 2, "hardness", np.random.default_rng(1))
    pairs = build_pairs(ep, ds.classes)
    full = compute_weights(pairs, ep, params, enc, TrainConfig())
    sp = [p for p in full if p.kind == "support_proto"]
    per_support = {p.left.id: p.w for p in sp}
    assert abs(sum(per_support.values()) - 1) <= 1e-12
    assert all(p.w == 5.0 for p in full if p.kind == "proto_proto")
    ew = compute_weights(pairs, ep, params, enc, TrainConfig(ew=True))
    assert all(p.w == 1 / 6 for p in ew if p.kind == "support_proto")


def test_contrastive_cases():
    enc, params, classes, ep = identity_setup([[1.0, 2.0], [4.0, 6.0]], [[[1.0, 2.0]], [[1.0, 2.0]]])
    doc0 = ep.support[0][0]
    cfg = TrainConfig(margin_delta=3.0)
    same = contrastive_loss([SamplePair(doc0, classes[0], 1, 1.0)], params, enc, cfg).value
    assert abs(float(same)) <= 1e-12
    far = contrastive_loss([SamplePair(classes[0], classes[1], 0, 1.0)], params, enc, cfg).value  # dis 5 >= 3
    assert abs(float(far)) <= 1e-12
    enc, params, classes, ep = identity_setup([[0.0, 0.0], [1.0, 0.0]], [[[0.0, 0.0]], [[1.0, 0.0]]])
    half = contrastive_loss([SamplePair(classes[0], classes[1], 0, 0.5)], params, enc, cfg).value
    assert abs(float(half) - 1.0) <= 1e-12


def test_contrastive_requires_weights():
    enc, params, classes, ep = identity_setup([[0.0, 0.0], [1.0, 0.0]], [[[0.0, 0.0]], [[1.0, 0.0]]])
    with pytest.raises(TrainingError, match="weighted"):
        contrastive_loss([SamplePair(classes[0], classes[1], 0)], params, enc, TrainConfig())


def test_contrastive_nonnegative_and_zero_iff():
    ds, enc, params = _tiny(2)
    rng = np.random.default_rng(2)
    for _ in range(20):
        ep = sample_episode(ds, "train", 3, 2, 1, "hardness", rng)
        pairs = compute_weights(build_pairs(ep, ds.classes), ep, params, enc, TrainConfig())
        assert float(contrastive_loss(pairs, params, enc, TrainConfig(), ep).value) >= 0


def test_query_loss_cases():
    # equidistant -> ln 5
    vecs = [[1.0 if i == j else 0.0 for j in range(5)] for i in range(5)]
    enc, params, classes, ep = identity_setup(vecs, [[v] for v in vecs], [[[0.0] * 5] for _ in range(5)])
    assert abs(float(query_loss(ep, params, classes, enc, TrainConfig()).value) - 1.6094379124341003) <= 1e-9
    # distances (1, 1 + ln 9) -> -log 0.9
    b = 1 + math.log(9)
    enc, params, classes, ep = identity_setup([[1.0, 0.0], [b, 0.0]], [[[0.0, 0.0]], [[0.0, 0.0]]], [[[0.0, 0.0]], []])
    assert abs(float(query_loss(ep, params, classes, enc, TrainConfig()).value) + math.log(0.9)) <= 1e-12
    # very far wrong prototype -> loss ~ 0
    enc, params, classes, ep = identity_setup([[0.0, 0.0], [1e4, 0.0]], [[[0.0, 0.0]], [[0.0, 0.0]]], [[[0.0, 0.0]], []])
    assert float(query_loss(ep, params, classes, enc, TrainConfig()).value) < 1e-12


def test_inner_update_cases():
    p = {"a": np.array([1.0, 2.0])}
    assert inner_update(p, {"a": np.array([3.0, 4.0])}, 0.0)["a"].tolist() == [1.0, 2.0]
    assert inner_update(p, {"a": np.zeros(2)}, 0.5)["a"].tolist() == [1.0, 2.0]
    with pytest.raises(TrainingError, match="non-finite"):
        inner_update(p, {"a": np.array([np.nan, 0.0])}, 0.1)


def test_adapt_identity_at_zero_lr():
    ds, enc, params = _tiny()
    ep = sample_episode(ds, "train", 3, 1, 2, "uniform", np.random.default_rng(0))
    out, _ = adapt(ep, params, ds.classes, enc, TrainConfig(inner_lr=0.0))
    for k in params:
        assert np.array_equal(out[k], params[k])


def test_inner_step_descends():
    ds, enc, params = _tiny(3)
    cfg = TrainConfig(inner_lr=1e-4)
    ep = sample_episode(ds, "train", 3, 2, 2, "hardness", np.random.default_rng(4))
    pairs = compute_weights(build_pairs(ep, ds.classes), ep, params, enc, cfg)
    before = float(contrastive_loss(pairs, params, enc, cfg, ep).value)
    adapted, lc = adapt(ep, params, ds.classes, enc, cfg)
    assert abs(lc - before) < 1e-12
    after = float(contrastive_loss(pairs, adapted, enc, cfg, ep).value)
    assert after <= before


@pytest.mark.parametrize("rpv", [False, True])
def test_contrastive_gradient_fd(rpv):
    ds, enc, params = _tiny(5)
    cfg = TrainConfig(rpv=rpv)
    ep = sample_episode(ds, "train", 3, 2, 1, "hardness", np.random.default_rng(5))
    pairs = compute_weights(build_pairs(ep, ds.classes), ep, params, enc, cfg)
    nodes = {k: ad.param(v) for k, v in params.items()}
    g = ad.backward(contrastive_loss(pairs, nodes, enc, cfg, ep), nodes)
    fd = finite_diff_gradient(lambda p: float(contrastive_loss(pairs, p, enc, cfg, ep).value), params)
    for k in params:
        assert max_relative_error(g[k], fd[k]) <= 1e-4, k


def test_meta_loss_is_mean_of_task_losses():
    ds, enc, params = _tiny()
    rng = np.random.default_rng(6)
    eps = [sample_episode(ds, "train", 3, 1, 2, "uniform", rng) for _ in range(3)]
    cfg = TrainConfig(inner_lr=0.05)
    per = [task_gradient(e, params, ds.classes, enc, cfg)[0] for e in eps]
    loss, _ = meta_gradient(eps, params, ds.classes, enc, cfg)
    assert abs(loss - sum(per) / 3) <= 1e-12
    single, g1 = meta_gradient(eps[:1], params, ds.classes, enc, cfg)
    t, gt = task_gradient(eps[0], params, ds.classes, enc, cfg)
    assert single == t and all(np.array_equal(g1[k], gt[k]) for k in g1)


def test_zero_gradient_leaves_params():
    state = TrainState.fresh({"a": np.array([1.0, -2.0])})
    adam_update(state, {"a": np.zeros(2)}, TrainConfig())
    assert state.params["a"].tolist() == [1.0, -2.0]


def test_meta_step_descends_at_zero_inner_lr():
    ds, enc, params = _tiny(7)
    cfg = TrainConfig(inner_lr=0.0, outer_lr=1e-5)
    rng = np.random.default_rng(7)
    eps = [sample_episode(ds, "train", 3, 1, 2, "uniform", rng) for _ in range(3)]
    state = TrainState.fresh(params)
    before = meta_step(eps, state, ds.classes, enc, cfg)
    after, _ = meta_gradient(eps, state.params, ds.classes, enc, cfg)
    assert after <= before


def test_predict_tie_rule():
    scores = np.array([[-1.0, -1.0, -2.0], [-3.0, -0.5, -0.5]])
    assert predict_indices(scores, [4, 2, 7]).tolist() == [1, 1]
    assert predict_indices(scores, [1, 2, 0]).tolist() == [0, 2]


def test_train_patience_zero_and_determinism():
    ds, table = synth_corpus(8, 10, 6, 4, 0.0, 6, seed=0, split_counts=(4, 4, 0))
    enc_cfg = EncoderConfig(filter_widths=(1, 2), maps_per_width=3, d_fc=4)
    cfg = TrainConfig(n_way=3, k_shot=1, l_query=2, max_epochs=6, patience=0, val_episodes=3, outer_lr=1e-3)
    _, rec_a = train(ds, cfg, enc_cfg)
    _, rec_b = train(ds, cfg, enc_cfg)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "seconds"} for r in rs]  # noqa: E731
    assert strip(rec_a) == strip(rec_b)
    losses = [r["val_loss"] for r in rec_a]
    best = np.minimum.accumulate(losses)
    # stops at the first epoch that fails to improve
    first_bad = next((i for i in range(1, len(losses)) if losses[i] >= best[i - 1]), None)
    assert len(rec_a) == (first_bad + 1 if first_bad is not None else 6)


def test_train_validates_splits():
    ds, _ = synth_corpus(6, 10, 6, 4, 0.0, 6, seed=0, split_counts=(3, 3, 0))
    with pytest.raises(Exception, match="train"):
        train(ds, TrainConfig(n_way=5, max_epochs=1), EncoderConfig(d_fc=4, maps_per_width=2))


def test_config_validation_and_ablations():
    with pytest.raises(ValueError, match="n_way"):
        TrainConfig(n_way=0)
    with pytest.raises(ValueError, match="unknown ablation"):
        TrainConfig().with_ablations(["zzz"])
    c = TrainConfig().with_ablations(["rpv", "ln"])
    assert c.prototype_mode == "support_mean" and c.knowledge_mode == "name_only" and c.sampler_mode == "hardness"
    b = proto_baseline_config(TrainConfig())
    assert b.inner_lr == 0 and b.rpv and b.rts and not b.proto_pairs

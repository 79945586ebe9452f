import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasn.corpus import synth_corpus
from metasn.embeddings import EmbeddingTable
from metasn.encoder import (
    Encoder,
    EncoderConfig,
    EncoderError,
    check_compatible,
    distance,
    distance_matrix,
    encode_prototype,
    init_params,
    load_checkpoint,
    pairwise_distances_np,
    param_shapes,
    prototype_matrix,
    save_checkpoint,
)
from metasn.numerics import autodiff as ad
from metasn.numerics import finite_diff_gradient, max_relative_error
from metasn.sampler import sample_episode


@pytest.fixture
def table():
    rng = np.random.default_rng(0)
    return EmbeddingTable.from_dict({f"t{i}": rng.standard_normal(6) for i in range(10)})


def test_config_validation():
    with pytest.raises(EncoderError):
        EncoderConfig(filter_widths=(3, 1))
    with pytest.raises(EncoderError):
        EncoderConfig(distance="manhattan")
    assert EncoderConfig().concat_dim == 48


def test_param_shapes_and_init():
    cfg = EncoderConfig(filter_widths=(1, 3), maps_per_width=4, d_fc=5)
    shapes = param_shapes(cfg, 6)
    assert shapes["conv3.weight"] == (4, 3, 6) and shapes["fc.weight"] == (8, 5)
    p = init_params(cfg, 6, np.random.default_rng(0))
    assert not p["fc.bias"].any() and not p["conv1.bias"].any()
    big = init_params(EncoderConfig(maps_per_width=64), 100, np.random.default_rng(1))
    # He scale: std = sqrt(2 / fan_in)
    assert abs(big["conv5.weight"].std() - np.sqrt(2 / 500)) < 0.01 * np.sqrt(2 / 500) * 5


def test_seven_tokens_shape(table):
    cfg = EncoderConfig()
    enc = Encoder(table, cfg)
    p = init_params(cfg, 6, np.random.default_rng(0))
    out = enc.encode([f"t{i}" for i in range(7)], p)
    assert out.shape == (64,)
    conv = [ad.conv1d_valid(enc.batch_inputs([[f"t{i}" for i in range(7)]])[0][0], p[f"conv{w}.weight"]) for w in (1, 3, 5)]
    assert [c.shape[1] for c in conv] == [7, 5, 3]


def test_short_input_padded(table):
    enc = Encoder(table, EncoderConfig())
    x, lengths = enc.batch_inputs([["t1", "t2"]])
    assert x.shape == (1, 5, 6) and lengths.tolist() == [5]
    assert not x[0, 2:].any()


def test_batch_padding_is_masked(table):
    cfg = EncoderConfig(filter_widths=(1, 2), maps_per_width=3, d_fc=4)
    enc = Encoder(table, cfg)
    p = init_params(cfg, 6, np.random.default_rng(2))
    for k in p:
        if k.endswith("bias"):
            p[k] = np.random.default_rng(3).standard_normal(p[k].shape)
    short = ["t1", "t2", "t3"]
    alone = enc.encode(short, p).value
    batched = enc.encode_batch([short, [f"t{i}" for i in range(10)]], p).value[0]
    assert np.allclose(alone, batched, atol=1e-13)


def test_permutation_sensitive_counterexample():
    t = EmbeddingTable.from_dict({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    cfg = EncoderConfig(filter_widths=(2,), maps_per_width=1, d_fc=1)
    p = {
        # filter responds to "a" then "b"
        "conv2.weight": np.array([[[1.0, 0.0], [0.0, 1.0]]]),
        "conv2.bias": np.zeros(1),
        "fc.weight": np.ones((1, 1)),
        "fc.bias": np.zeros(1),
    }
    enc = Encoder(t, cfg)
    assert enc.encode(["a", "b"], p).value.tolist() == [2.0]
    assert enc.encode(["b", "a"], p).value.tolist() == [0.0]


def test_distance_examples():
    assert float(distance([0.0, 0.0], [3.0, 4.0]).value) == 5.0
    assert float(distance([0.0, 0.0], [3.0, 4.0], "squared_euclidean").value) == 25.0
    x = np.array([1.5, -2.0])
    assert float(distance(x, x).value) == 0.0
    assert abs(float(distance([1.0, 0.0], [0.0, 2.0], "cosine").value) - 1.0) < 1e-15
    with pytest.raises(EncoderError):
        distance([0.0, 0.0], [1.0, 1.0], "cosine")
    with pytest.raises(ad.ShapeError):
        distance([0.0, 0.0], [1.0, 1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["euclidean", "squared_euclidean", "cosine"]))
def test_distance_matrix_agrees_with_numpy(seed, metric):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    m = distance_matrix(a, b, metric).value
    assert np.allclose(m, pairwise_distances_np(a, b, metric), atol=1e-12)
    assert np.allclose(m.T, pairwise_distances_np(b, a, metric), atol=1e-12)
    assert np.all(m >= -1e-12)


def test_distance_of_encodings_gradient(table):
    cfg = EncoderConfig(filter_widths=(1, 3), maps_per_width=2, d_fc=4)
    enc = Encoder(table, cfg)
    params = init_params(cfg, 6, np.random.default_rng(5))
    params = {k: v + 0.1 * np.random.default_rng(6).standard_normal(v.shape) for k, v in params.items()}
    a, b = ["t1", "t2", "t3", "t4"], ["t5", "t6"]

    def f(p):
        return distance(enc.encode(a, p), enc.encode(b, p))

    nodes = {k: ad.param(v) for k, v in params.items()}
    grads = ad.backward(f(nodes), nodes)
    fd = finite_diff_gradient(lambda p: float(f(p).value), params)
    for k in params:
        assert max_relative_error(grads[k], fd[k]) <= 1e-4, k


def _episode_setup(seed=0, k=1):
    ds, table = synth_corpus(6, 8, 6, 4, 0.0, 6, seed=seed, split_counts=(6, 0, 0))
    cfg = EncoderConfig(filter_widths=(1, 2), maps_per_width=3, d_fc=4)
    enc = Encoder(table, cfg)
    params = init_params(cfg, 6, np.random.default_rng(seed))
    return ds, enc, params


def test_support_mean_single_shot_is_support_encoding():
    ds, enc, params = _episode_setup()
    ep = sample_episode(ds, "train", 3, 1, 1, "uniform", np.random.default_rng(0))
    protos = prototype_matrix(ep, ds.classes, params, enc, "support_mean").value
    for i, c in enumerate(ep.target_classes):
        assert np.allclose(protos[i], enc.encode(ep.support[c][0].tokens, params).value, atol=1e-14)


def test_label_text_stable_support_mean_drifts():
    ds, enc, params = _episode_setup()
    c = 0
    rng = np.random.default_rng(1)
    eps = []
    while len(eps) < 2:
        ep = sample_episode(ds, "train", 3, 2, 1, "uniform", rng)
        if c in ep.target_classes:
            eps.append(ep)
    lt = [encode_prototype(ds.classes[c], e, params, enc, "label_text").value for e in eps]
    sm = [encode_prototype(ds.classes[c], e, params, enc, "support_mean").value for e in eps]
    assert np.array_equal(lt[0], lt[1])
    same_support = {d.id for d in eps[0].support[c]} == {d.id for d in eps[1].support[c]}
    assert same_support or not np.allclose(sm[0], sm[1])


def test_prototype_matrix_matches_encode_prototype():
    ds, enc, params = _episode_setup()
    ep = sample_episode(ds, "train", 3, 2, 1, "uniform", np.random.default_rng(2))
    for mode in ("label_text", "support_mean"):
        m = prototype_matrix(ep, ds.classes, params, enc, mode).value
        for i, c in enumerate(ep.target_classes):
            assert np.allclose(m[i], encode_prototype(ds.classes[c], ep, params, enc, mode).value, atol=1e-13)


def test_checkpoint_round_trip(tmp_path, table):
    cfg = EncoderConfig(filter_widths=(1, 3), maps_per_width=2, d_fc=4)
    p = init_params(cfg, 6, np.random.default_rng(9))
    p["fc.bias"] = np.array([1e-300, -0.1, np.pi, 1 / 3])
    save_checkpoint(tmp_path / "c.json", p, cfg, 6, {"epoch": 3})
    q, cfg2, dim, extra = load_checkpoint(tmp_path / "c.json")
    assert cfg2 == cfg and dim == 6 and extra == {"epoch": 3}
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()


def test_checkpoint_compatibility():
    cfg = EncoderConfig()
    check_compatible(cfg, 16, EncoderConfig(), 16)
    with pytest.raises(EncoderError, match="d_fc"):
        check_compatible(cfg, 16, EncoderConfig(d_fc=32), 16)
    with pytest.raises(EncoderError, match="dimension"):
        check_compatible(cfg, 16, cfg, 8)


def test_encode_deterministic_and_finite(table):
    cfg = EncoderConfig()
    enc = Encoder(table, cfg)
    p = init_params(cfg, 6, np.random.default_rng(0))
    docs = [["t1"], ["t2", "t3", "zzz"], [f"t{i}" for i in range(10)]]
    a, b = enc.encode_values(docs, p), enc.encode_values(docs, p)
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a)) and a.shape == (3, 64)

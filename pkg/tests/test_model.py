import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abmil_acc import graphcore as gc
from abmil_acc.model import (
    BatchNorm,
    EncoderParams,
    ModelConfig,
    Mode,
    ParamSet,
    PoolerParams,
    attention_pool,
    bag_label,
    bce_loss,
    encode,
    init_params,
    load_params,
    save_params,
)


@pytest.fixture
def params():
    return init_params(ModelConfig(5, (8, 6), 4), np.random.default_rng(0))


def test_zero_weights_give_zero_features():
    enc = EncoderParams([np.zeros((5, 4)), np.zeros((4, 3))], [np.zeros(4), np.zeros(3)])
    X = np.random.default_rng(1).normal(size=(7, 5))
    assert np.array_equal(encode(enc, X).value, np.zeros((7, 3)))


def test_identity_layer_passes_instances_through():
    enc = EncoderParams([np.eye(4)], [np.zeros(4)], final_activation=False)
    X = np.random.default_rng(2).normal(size=(3, 4))
    assert np.array_equal(encode(enc, X).value, X)


def test_empty_batch_rejected(params):
    with pytest.raises(ValueError, match="empty instance batch"):
        encode(params.encoder, np.zeros((0, 5)))


def _bn_identity_encoder(dim):
    bn = BatchNorm(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim))
    return EncoderParams([np.eye(dim)], [np.zeros(dim)], [bn], final_activation=False)


def test_batchnorm_train_matches_hand_formula():
    X = np.array([[1.0, 2.0], [3.0, 6.0]])
    enc = _bn_identity_encoder(2)
    out = encode(enc, X, Mode.TRAIN).value
    # mean [2, 4], biased var [1, 4], eps 1e-5
    expected = np.array([[-1 / np.sqrt(1 + 1e-5), -2 / np.sqrt(4 + 1e-5)],
                         [1 / np.sqrt(1 + 1e-5), 2 / np.sqrt(4 + 1e-5)]])
    np.testing.assert_allclose(out, expected, rtol=1e-15)
    # running stats: momentum 0.1, unbiased var [2, 8]
    np.testing.assert_allclose(enc.norms[0].running_mean, [0.2, 0.4])
    np.testing.assert_allclose(enc.norms[0].running_var, [0.9 + 0.2, 0.9 + 0.8])


def test_batchnorm_identical_rows_normalize_to_zero():
    X = np.array([[0.5, -1.5, 2.0]] * 2)
    out = encode(_bn_identity_encoder(3), X, Mode.TRAIN).value
    assert np.array_equal(out, np.zeros((2, 3)))


def test_batchnorm_infer_uses_running_stats_and_changes_nothing():
    enc = _bn_identity_encoder(2)
    enc.norms[0].running_mean = np.array([1.0, -1.0])
    enc.norms[0].running_var = np.array([4.0, 0.25])
    X = np.array([[3.0, 0.0]])
    out = encode(enc, X, Mode.INFER).value
    np.testing.assert_allclose(out, [[2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(0.25 + 1e-5)]])
    np.testing.assert_array_equal(enc.norms[0].running_mean, [1.0, -1.0])


def test_batchnorm_makes_features_batch_dependent():
    params = init_params(ModelConfig(3, (4, 3), 2, batch_norm=True), np.random.default_rng(0))
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3))
    batch_a = np.vstack([x, rng.normal(size=(3, 3))])
    batch_b = np.vstack([x, rng.normal(size=(3, 3)) + 4.0])
    za = encode(params.copy().encoder, batch_a, Mode.TRAIN).value[0]
    zb = encode(params.copy().encoder, batch_b, Mode.TRAIN).value[0]
    assert not np.allclose(za, zb)


def test_train_equals_infer_without_bn(params):
    X = np.random.default_rng(3).normal(size=(6, 5))
    a = encode(params.encoder, X, Mode.TRAIN).value
    b = encode(params.encoder, X, Mode.INFER).value
    assert np.array_equal(a, b)


def test_single_instance_attention(params):
    z = np.random.default_rng(4).normal(size=(1, 6))
    res = attention_pool(params.pooler, z)
    assert res.attention_weights[0] == 1.0


def test_identical_instances_share_attention(params):
    z = np.tile(np.random.default_rng(4).normal(size=(1, 6)), (2, 1))
    np.testing.assert_array_equal(attention_pool(params.pooler, z).attention_weights, [0.5, 0.5])


def test_zero_attention_vector_gives_uniform_weights(params):
    pooler = params.pooler.replace({"pool.w": np.zeros(4)})
    Z = np.random.default_rng(5).normal(size=(5, 6))
    np.testing.assert_allclose(attention_pool(pooler, Z).attention_weights, [0.2] * 5, rtol=1e-15)


def test_pool_rejects_wrong_feature_width(params):
    with pytest.raises(gc.ShapeError):
        attention_pool(params.pooler, np.ones((3, 5)))


def test_pooler_shape_consistency():
    with pytest.raises(gc.ShapeError):
        PoolerParams(np.ones((3, 4)), np.ones(2), np.ones(4), np.ones(1))
    with pytest.raises(gc.ShapeError):
        EncoderParams([np.ones((3, 4)), np.ones((5, 2))], [np.ones(4), np.ones(2)])


@pytest.mark.parametrize("score,y,expected", [(0.5, 1, np.log(2)), (0.5, 0, np.log(2))])
def test_bce_values(score, y, expected):
    assert bce_loss(score, y).value == pytest.approx(expected, rel=1e-15)


def test_bce_near_perfect_prediction_tends_to_zero():
    assert bce_loss(1 - 1e-15, 1).value < 1e-11
    assert np.isfinite(bce_loss(1.0, 0).value)


@pytest.mark.parametrize("labels,expected", [([0, 0, 0], 0), ([0, 1, 0], 1), ([1, 1, 1], 1)])
def test_bag_label(labels, expected):
    assert bag_label(labels) == expected


def test_bag_label_empty():
    with pytest.raises(ValueError):
        bag_label([])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 20))
def test_attention_normalized_and_permutation_symmetric(seed, n):
    rng = np.random.default_rng(seed)
    p = init_params(ModelConfig(3, (5, 4), 3), rng)
    Z = rng.normal(size=(n, 4)) * 3
    perm = rng.permutation(n)
    res = attention_pool(p.pooler, Z)
    res_p = attention_pool(p.pooler, Z[perm])
    a = res.attention_weights
    assert abs(a.sum() - 1.0) <= 1e-12 and np.all(a >= 0)
    assert 0.0 < res.bag_score < 1.0
    np.testing.assert_allclose(res_p.attention_weights, a[perm], rtol=0, atol=1e-15)
    assert abs(res_p.bag_score - res.bag_score) <= 1e-12


def test_init_is_seeded_and_bounded():
    cfg = ModelConfig(9, (16, 8), 4)
    a = init_params(cfg, np.random.default_rng(7))
    b = init_params(cfg, np.random.default_rng(7))
    for (name, x), y in zip(a.named_tensors().items(), b.named_tensors().values()):
        assert np.array_equal(x, y), name
    assert np.abs(a.encoder.weights[0]).max() <= 1 / 3


@pytest.mark.parametrize("bn", [False, True])
def test_checkpoint_round_trip(tmp_path, bn):
    p = init_params(ModelConfig(4, (6, 5), 3, batch_norm=bn), np.random.default_rng(1))
    if bn:
        encode(p.encoder, np.random.default_rng(2).normal(size=(5, 4)), Mode.TRAIN)
    save_params(p, tmp_path / "ck.bin")
    q = load_params(tmp_path / "ck.bin")
    assert isinstance(q, ParamSet)
    for (k, x), y in zip(p.named_tensors().items(), q.named_tensors().values()):
        assert np.array_equal(x, y), k
    assert p.encoder.named_buffers().keys() == q.encoder.named_buffers().keys()
    for k, v in p.encoder.named_buffers().items():
        assert np.array_equal(v, q.encoder.named_buffers()[k])
    manifest = (tmp_path / "ck.txt").read_text()
    assert "enc.0.W\t4x6" in manifest


def test_checkpoint_binary_header(tmp_path):
    p = init_params(ModelConfig(2, (3,), 2), np.random.default_rng(0))
    save_params(p, tmp_path / "ck.bin")
    raw = (tmp_path / "ck.bin").read_bytes()
    # enc.0.W, enc.0.b, V, w, c, b, final_activation flag
    assert int.from_bytes(raw[:4], "little") == 7
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 2 and int.from_bytes(raw[12:16], "little") == 3

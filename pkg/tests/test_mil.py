import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seamil.autodiff import ContractError, Parameter, Tensor, bce_loss, matmul
from seamil.backbone import BackboneConfig, ConfigError
from seamil.mil import (
    Bag,
    TargetModel,
    aggregate,
    attention_weights,
    bag_decision,
    predict_bag,
)
from seamil.models import SourceModel

from gradcheck import check

TINY = BackboneConfig(block_channel_widths=[4, 8], input_size=(8, 8, 3), se_reduction_ratio=2)


def _mil_params(rng, c, l=3):
    return {
        "mil.V": Parameter("mil.V", rng.normal(size=(l, c))),
        "mil.w": Parameter("mil.w", rng.normal(size=(l, 1))),
        "bag_classifier.weights": Parameter("bag_classifier.weights", rng.normal(size=(c, 1))),
        "bag_classifier.bias": Parameter("bag_classifier.bias", rng.normal(size=1)),
    }


@pytest.fixture(scope="module")
def target():
    src = SourceModel.init(TINY, "gmp", np.random.default_rng(0))
    return TargetModel.from_source(src, "bgas", 6, np.random.default_rng(1))


def test_single_instance_attention_is_one():
    a = attention_weights(Tensor([[0.3, -1.0]]), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 1))))
    assert a.data.tolist() == [[1.0]]


def test_zero_w_gives_uniform():
    rng = np.random.default_rng(0)
    a = attention_weights(Tensor(rng.normal(size=(7, 3))), Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros((4, 1))))
    np.testing.assert_allclose(a.data, np.full((1, 7), 1 / 7), atol=1e-15)


def test_two_instance_hand_example():
    a = attention_weights(Tensor([[0.0], [10.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
    t = math.tanh(10.0)
    expect = [1 / (1 + math.exp(t)), math.exp(t) / (1 + math.exp(t))]
    np.testing.assert_allclose(a.data[0], expect, atol=1e-12)
    np.testing.assert_allclose(a.data[0], [0.2689, 0.7311], atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_attention_is_a_distribution(i, seed):
    rng = np.random.default_rng(seed)
    a = attention_weights(Tensor(rng.normal(size=(i, 5)) * 4), Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 1)) * 5)).data
    assert abs(a.sum() - 1.0) <= 1e-9
    assert np.all((a > 0) & (a <= 1))


def test_pooling_examples():
    h = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert aggregate(h, "bgmp").data.tolist() == [[3.0, 4.0]]
    assert aggregate(h, "bgap").data.tolist() == [[2.0, 3.0]]


def test_bgas_with_zero_w_equals_bgap():
    rng = np.random.default_rng(1)
    params = _mil_params(rng, 4)
    params["mil.w"] = Parameter("mil.w", np.zeros((3, 1)))
    h = Tensor(rng.normal(size=(9, 4)))
    np.testing.assert_allclose(aggregate(h, "bgas", params).data, aggregate(h, "bgap").data, atol=1e-9)


def test_unknown_aggregation():
    with pytest.raises(ConfigError):
        aggregate(Tensor(np.ones((2, 2))), "median")


@pytest.mark.parametrize("mode", ["bgas", "bgap", "bgmp"])
def test_bag_prediction_permutation_invariant(mode):
    rng = np.random.default_rng(2)
    params = _mil_params(rng, 5)
    h = rng.normal(size=(12, 5))
    base = predict_bag(aggregate(Tensor(h), mode, params), params).data
    for _ in range(100):
        perm = rng.permutation(12)
        out = predict_bag(aggregate(Tensor(h[perm]), mode, params), params).data
        assert abs(out - base).max() <= 1e-9


def test_bgmp_duplicate_instance_bit_exact():
    h = np.random.default_rng(3).normal(size=(5, 4))
    dup = np.vstack([h, h[2:3]])
    assert np.array_equal(aggregate(Tensor(h), "bgmp").data, aggregate(Tensor(dup), "bgmp").data)


def test_predict_bag_values():
    params = {
        "bag_classifier.weights": Parameter("bag_classifier.weights", np.zeros((3, 1))),
        "bag_classifier.bias": Parameter("bag_classifier.bias", np.zeros(1)),
    }
    assert predict_bag(Tensor([[1.0, 2.0, 3.0]]), params).item() == 0.5
    params["bag_classifier.bias"] = Parameter("bag_classifier.bias", np.array([math.log(3)]))
    assert predict_bag(Tensor([[1.0, 2.0, 3.0]]), params).item() == pytest.approx(0.75, abs=1e-15)


def test_bag_decision_tie_is_malignant():
    assert bag_decision(0.5) == 1
    assert bag_decision(0.4999) == 0


@pytest.mark.parametrize("seed", range(5))
def test_bag_loss_gradient_wrt_attention_parameters(seed):
    rng = np.random.default_rng(seed)
    i = int(rng.integers(1, 5))
    h = Tensor(rng.normal(size=(i, 4)))
    wc = Tensor(rng.normal(size=(4, 1)))
    b = Tensor(rng.normal(size=(1,)))
    params = {"bag_classifier.weights": Parameter("w", wc.data), "bag_classifier.bias": Parameter("b", b.data)}
    y = float(rng.integers(0, 2))

    def fn(v, w):
        z = matmul(attention_weights(h, v, w), h)
        return bce_loss(predict_bag(z, params), y)

    assert check(fn, [rng.normal(size=(2, 4)), rng.normal(size=(2, 1))]) <= 1e-4


def test_bag_size_limits():
    with pytest.raises(ContractError):
        Bag("s", np.zeros((0, 4)), 0, embedded=True)
    with pytest.raises(ContractError):
        Bag("s", np.zeros((301, 4)), 0, embedded=True)
    assert len(Bag("s", np.zeros((300, 4)), 1, embedded=True)) == 300


def test_embed_bag_shape_and_duplicates(target):
    x = np.random.default_rng(4).uniform(size=(4, 8, 8, 3))
    x = np.concatenate([x, x[:1]])
    h = target.embed_bag(Bag("s", x, 1)).data
    assert h.shape == (5, 8)
    assert np.array_equal(h[0], h[4])


def test_embed_bag_matches_per_instance_composition(target):
    x = np.random.default_rng(5).uniform(size=(3, 8, 8, 3))
    h = target.embed_bag(Bag("s", x, 0)).data
    net = target.backbone()
    for i in range(3):
        row = net.embed(Tensor(x[i])).data[0]
        np.testing.assert_allclose(h[i], row, atol=1e-12)


def test_forward_equals_manual_composition(target):
    x = np.random.default_rng(6).uniform(size=(4, 8, 8, 3))
    bag = Bag("s", x, 1)
    prob, attn = target.forward(bag)
    h = target.embed_bag(bag)
    manual = predict_bag(aggregate(h, "bgas", target.params), target.params)
    assert abs(prob.item() - manual.item()) <= 1e-12
    assert attn.shape == (1, 4)


def test_from_source_copies_backbone_and_drops_classifier():
    src = SourceModel.init(TINY, "gmp", np.random.default_rng(7))
    tgt = TargetModel.from_source(src, "bgap", 5, np.random.default_rng(8))
    assert not any(k.startswith("classifier.") for k in tgt.params)
    for k, p in src.params.items():
        if not k.startswith("classifier."):
            assert np.array_equal(tgt.params[k].data, p.data)
    assert tgt.params["mil.V"].data.shape == (5, 8)
    assert all(not p.name.startswith("mil.") for p in tgt.trainable())


def test_cached_embeddings_width_checked(target):
    from seamil.autodiff import DimensionError

    with pytest.raises(DimensionError):
        target.embed_bag(Bag("s", np.zeros((2, 3)), 0, embedded=True))

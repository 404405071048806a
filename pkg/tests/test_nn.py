import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffda import tensor as T
from ffda.errors import ContractError, ShapeError
from ffda.model import ArchConfig, build_model
from ffda.nn import BatchNorm2d, Classifier, Conv2d, FeatureExtractor, bn_update_stats
from ffda.tensor import Tensor, precision


def _nhwc(rng, n=6, c=3):
    return Tensor(rng.standard_normal((n, 4, 4, c)) * 2 + 1)


def test_default_extractor_emits_512_features(rng):
    ext = FeatureExtractor(rng)
    assert ext.out_dim == 512
    assert ext(rng.uniform(0, 1, (2, 3, 16, 16))).shape == (2, 512)


def test_extractor_rejects_wrong_input_shape(rng):
    ext = FeatureExtractor(rng, hidden=4)
    with pytest.raises(ShapeError):
        ext(np.zeros((2, 1, 16, 16)))
    with pytest.raises(ShapeError):
        FeatureExtractor(rng, image_size=12)


def test_bn_train_mode_updates_running_stats_with_momentum(rng):
    bn = BatchNorm2d(3)
    x = _nhwc(rng)
    with precision("f64"):
        bn.running_mean.data = np.zeros(3)
        bn.running_var.data = np.ones(3)
        bn(Tensor(x.data.astype(np.float64)), "train")
    flat = x.data.reshape(-1, 3).astype(np.float64)
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * flat.mean(0), rtol=1e-5)
    np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * flat.var(0, ddof=1), rtol=1e-5)


def test_bn_eval_mode_is_per_example(rng):
    bn = BatchNorm2d(3)
    bn.running_mean.data = rng.standard_normal(3).astype(np.float32)
    x = _nhwc(rng)
    full = bn(x, "eval").data
    one = bn(Tensor(x.data[2:3]), "eval").data
    np.testing.assert_array_equal(full[2:3], one)


def test_bn_adapt_replaces_statistics_from_leading_rows(rng):
    bn = BatchNorm2d(3)
    x = _nhwc(rng)
    out = bn(x, "adapt", stat_rows=4).data
    rows = x.data[:4].reshape(-1, 3)
    np.testing.assert_allclose(bn.running_mean.data, rows.mean(0), rtol=1e-5)
    np.testing.assert_allclose(bn.running_var.data, rows.var(0), rtol=1e-4)
    np.testing.assert_allclose(out[:4].reshape(-1, 3).mean(0), 0, atol=1e-5)


def test_bn_adapt_floors_variance_for_constant_input():
    bn = BatchNorm2d(2)
    out = bn(Tensor(np.ones((3, 2, 2, 2))), "adapt").data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(bn.running_var.data, np.float32(bn.eps))


def test_bn_rejects_unknown_mode(rng):
    with pytest.raises(ValueError):
        BatchNorm2d(3)(_nhwc(rng), "test")


def test_bn_update_stats_leaves_original_untouched(rng):
    ext = FeatureExtractor(rng, hidden=4)
    before = {k: v.copy() for k, v in ext.state_dict().items()}
    adapted = bn_update_stats(ext, rng.uniform(0, 1, (5, 3, 16, 16)))
    for k, v in ext.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert not np.array_equal(adapted.blocks[0].bn.running_mean.data,
                              ext.blocks[0].bn.running_mean.data)
    with pytest.raises(ContractError):
        bn_update_stats(ext, rng.uniform(0, 1, (1, 3, 16, 16)))


def test_conv_blocks_carry_no_bias_before_batch_norm(rng):
    model = build_model("erm", ArchConfig(hidden=4))
    assert not any(k.endswith("conv.bias") for k in model.named_parameters())


def test_state_dict_round_trip_and_clone_independence(rng):
    a = build_model("cxda", ArchConfig(hidden=4, heads=2), seed=1)
    b = build_model("cxda", ArchConfig(hidden=4, heads=2), seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
    c = a.clone()
    c.classifier.fc1.weight.data += 1
    assert not np.array_equal(c.classifier.fc1.weight.data, a.classifier.fc1.weight.data)


def test_load_state_dict_rejects_mismatch():
    a = build_model("erm", ArchConfig(hidden=4))
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(ShapeError):
        a.load_state_dict(state)


def test_named_parameters_cover_all_three_groups():
    names = build_model("cxda", ArchConfig(hidden=4, heads=2)).named_parameters()
    for prefix in ("extractor.", "classifier.", "attention."):
        assert any(k.startswith(prefix) for k in names)


def test_cml_extractor_is_widened_for_context_channels():
    m = build_model("cml", ArchConfig(hidden=4, context_hidden=4))
    assert m.extractor.in_ch == 6
    assert m.context_net is not None and m.attention is None


def test_layer_norm_rows_are_standardized(rng):
    x = Tensor(rng.standard_normal((4, 10)) * 5 + 3)
    y = T.layer_norm(x, Tensor(np.ones(10)), Tensor(np.zeros(10))).data
    np.testing.assert_allclose(y.mean(1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(1), 1, atol=1e-3)


def test_zero_images_give_finite_features_and_conv_bias_passes_through(rng):
    ext = FeatureExtractor(rng, hidden=4)
    out = ext(np.zeros((3, 3, 16, 16)), "eval").data
    assert np.all(np.isfinite(out))
    conv = Conv2d(2, 3, rng)
    conv.bias.data = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    y = conv(Tensor(np.zeros((1, 4, 4, 2)))).data
    np.testing.assert_array_equal(y, np.broadcast_to([0.5, -1.0, 2.0], (1, 4, 4, 3)))


def test_eval_features_do_not_depend_on_batch_mates(rng):
    ext = FeatureExtractor(rng, hidden=4)
    x = rng.uniform(0, 1, (4, 3, 16, 16))
    np.testing.assert_allclose(ext(x[:1], "eval").data[0], ext(x, "eval").data[0], atol=1e-6)


def test_classifier_examples(rng):
    clf = Classifier(2, 3, rng, hidden=2)
    for layer in (clf.fc1, clf.fc2):
        layer.weight.data[:] = 0
    assert not np.any(clf(Tensor(rng.standard_normal((4, 2)))).data)
    clf.fc1.weight.data = np.eye(2, dtype=np.float32)
    clf.fc2.weight.data = np.array([[1, 0, 2], [0, 1, -1]], dtype=np.float32)
    clf.fc2.bias.data = np.array([0, 0, 0.5], dtype=np.float32)
    # relu([3, -2]) = [3, 0] -> [3, 0, 6.5]
    np.testing.assert_allclose(clf(Tensor([[3.0, -2.0]])).data, [[3.0, 0.0, 6.5]])
    z = rng.standard_normal((5, 3))
    assert np.array_equal(np.argmax(z, 1), np.argmax(z + 7.0, 1))
    with pytest.raises(ShapeError):
        clf(Tensor(np.zeros((1, 3))))


def test_bn_stats_of_two_channel_toy_conv_match_hand_means(rng):
    ext = FeatureExtractor(rng, in_ch=1, hidden=2, image_size=8)
    w = np.zeros((2, 1, 5, 5), dtype=np.float32)
    w[0, 0, 2, 2], w[1, 0, 2, 2] = 1.0, -2.0   # centre taps: channel 0 copies, channel 1 scales by -2
    ext.blocks[0].conv.weight.data = w
    x = np.zeros((2, 1, 8, 8))
    x[0, 0, :2, :2] = [[1, 2], [3, 4]]
    x[1, 0, :2, :2] = [[4, 4], [0, 0]]
    adapted = bn_update_stats(ext, x)
    total = 1 + 2 + 3 + 4 + 4 + 4
    np.testing.assert_allclose(adapted.blocks[0].bn.running_mean.data,
                               [total / 128, -2 * total / 128], rtol=1e-6)


def test_bn_adaptation_changes_predictions_only_through_statistics(rng):
    ext = FeatureExtractor(rng, hidden=4)
    adapted = bn_update_stats(ext, rng.uniform(0, 1, (6, 3, 16, 16)))
    for k, v in ext.state_dict().items():
        if "running" not in k:
            np.testing.assert_array_equal(adapted.state_dict()[k], v)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
def test_layer_norm_is_shift_invariant(c, seed):
    x = np.random.default_rng(seed).standard_normal((3, 8))
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    with precision("f64"):
        a = T.layer_norm(Tensor(x), g, b).data
        shifted = T.layer_norm(Tensor(x + c), g, b).data
    np.testing.assert_allclose(a, shifted, atol=1e-5)

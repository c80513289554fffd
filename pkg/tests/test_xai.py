import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xaisplit import tensor as T
from xaisplit import xai
from xaisplit.nn import ReferenceNet
from xaisplit.tensor import Tensor
from xaisplit.xai import AttributionConfig, AttributionError, DegenerateImportanceWarning


def linear(wts):
    wts = np.asarray(wts, dtype=np.float64)
    return lambda x: T.sum_(T.mul(x, np.broadcast_to(wts, x.shape).copy()), axis=-1)


def smooth_net(rng, c=4, hidden=6):
    w1, w2 = rng.standard_normal((c, hidden)), rng.standard_normal(hidden)
    return lambda x: T.matmul(T.sigmoid(T.matmul(x, w1)), w2), (w1, w2)


@pytest.mark.parametrize("m", [1, 7, 128])
def test_linear_example(m):
    iv = xai.integrated_gradients(linear([2.0, 3.0]), np.array([1.0, 1.0]), AttributionConfig("IG", m), batched=False)
    np.testing.assert_allclose(iv.raw, [2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(iv.normalized, [0.4, 0.6], atol=1e-12)


def test_input_equal_to_baseline():
    x = np.array([[0.5, -1.0, 2.0]])
    with pytest.warns(DegenerateImportanceWarning):
        iv = xai.integrated_gradients(linear([1.0, 2.0, 3.0]), x, baseline=x)
    np.testing.assert_array_equal(iv.raw, 0.0)


def test_completeness_smooth_nets(rng):
    for _ in range(10):
        f, (w1, w2) = smooth_net(rng)
        x = rng.standard_normal((3, 4))
        iv = xai.integrated_gradients(f, x, AttributionConfig("IG", 128))
        fx = 1 / (1 + np.exp(-(x @ w1))) @ w2
        f0 = np.full(3, 0.5 * w2.sum())
        diff = fx - f0
        keep = np.abs(diff) > 0.1
        np.testing.assert_array_less(np.abs(iv.raw.sum(axis=1) - diff)[keep], 0.01 * np.abs(diff)[keep])


def test_channel_aggregation_is_signed_spatial_sum():
    # two spatial positions whose attributions cancel on channel 0
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0], w[0, 0, 1, 0], w[0, 0, :, 1] = 1.0, -1.0, 1.0
    f = lambda x: T.sum_(T.mul(x, np.broadcast_to(w, x.shape).copy()), axis=(1, 2, 3))
    x = np.ones((1, 1, 2, 2))
    iv = xai.integrated_gradients(f, x, AttributionConfig("IG", 1))
    np.testing.assert_allclose(iv.raw, [[0.0, 2.0]])


def test_gradient_saliency_projection():
    iv = xai.gradient_saliency(lambda x: T.index(x, (slice(None), 0)), np.array([[0.3, -2.0, 1.0]]))
    np.testing.assert_array_equal(iv.normalized, [[1.0, 0.0, 0.0]])


def test_gradient_saliency_constant_is_flagged():
    with pytest.warns(DegenerateImportanceWarning):
        iv = xai.gradient_saliency(lambda x: T.sum_(T.mul(x, 0.0), axis=1), np.ones((1, 3)))
    np.testing.assert_array_equal(iv.raw, 0.0)
    np.testing.assert_allclose(iv.normalized, 1 / 3)


def test_gradient_saliency_dead_relu():
    f = lambda x: T.sum_(T.relu(x), axis=1)
    iv = xai.gradient_saliency(f, np.array([[-1.0, 2.0, 0.5]]))
    assert iv.normalized[0, 0] == 0.0


def test_non_scalar_target_rejected():
    with pytest.raises(AttributionError):
        xai.integrated_gradients(lambda x: x, np.ones((2, 3)))


def test_bad_config():
    with pytest.raises(AttributionError):
        AttributionConfig("IG", 0)
    with pytest.raises(AttributionError):
        AttributionConfig("SHAP")


@given(arrays(np.float64, 5, elements=st.floats(-5, 5)).filter(lambda a: np.abs(a).sum() > 1e-3),
       st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_normalization_scale_invariance(raw, c):
    a = xai.normalize(raw)
    b = xai.normalize(c * raw)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.sum() == pytest.approx(1.0, abs=1e-9)
    assert xai.skewness(a, 2) == pytest.approx(xai.skewness(b, 2), abs=1e-12)


def test_skewness_examples():
    assert xai.skewness(np.array([0.6, 0.2, 0.1, 0.1]), 1) == pytest.approx(0.6)
    assert xai.skewness(np.full(8, 1 / 8), 3) == pytest.approx(3 / 8)
    assert xai.skewness(np.array([0.5, 0.3, 0.2]), 2) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        xai.skewness(np.array([0.5, 0.5]), 2)


# ----------------------------------------------------------------------- gating


def _ref_and_batch(rng):
    ref = ReferenceNet(4, 3, rng, width_mult=2)
    feats = rng.uniform(0, 2, (20, 3, 3, 4))
    preds = xai.reference_predictions(ref, feats)
    return ref, feats, preds


def test_gating_skips_wrong_predictions(rng):
    ref, feats, preds = _ref_and_batch(rng)
    wrong = (preds[0] + 1) % 3
    assert xai.gated_importance(ref, feats[0], wrong, AttributionConfig("IG", 4)) is None
    iv = xai.gated_importance(ref, feats[0], preds[0], AttributionConfig("IG", 4))
    assert iv.normalized.sum() == pytest.approx(1.0, abs=1e-9)


def test_gating_batch_skip_fraction(rng):
    ref, feats, preds = _ref_and_batch(rng)
    labels = preds.copy()
    labels[::3] = (labels[::3] + 1) % 3
    iv, mask = xai.gated_importance(ref, feats, labels, AttributionConfig("IG", 4))
    ref_acc = np.mean(preds == labels)
    assert 1 - mask.mean() <= 1 - ref_acc + 1e-12
    assert iv.normalized.shape == (mask.sum(), 4)


def test_gating_label_range(rng):
    ref, feats, _ = _ref_and_batch(rng)
    with pytest.raises(AttributionError):
        xai.gated_importance(ref, feats[:2], np.array([0, 3]))


def test_batched_equals_per_sample(rng):
    ref, feats, preds = _ref_and_batch(rng)
    f = xai.true_class_score(ref, preds[:4])
    batch = xai.integrated_gradients(f, feats[:4], AttributionConfig("IG", 6))
    for i in range(4):
        one = xai.integrated_gradients(xai.true_class_score(ref, preds[i:i + 1]), feats[i:i + 1], AttributionConfig("IG", 6))
        np.testing.assert_allclose(one.raw[0], batch.raw[i], atol=1e-10)

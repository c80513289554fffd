"""Channel-level feature importance: Integrated Gradients and gradient saliency.

Attribution functions take ``f``, a callable mapping a batch Tensor to one
scalar per sample (shape ``(N,)``) or to a single scalar.  Samples are
independent, so gradients of ``sum(f(x))`` are per-sample gradients.

Per-element attributions are summed over all non-channel axes with their sign,
then rectified and normalized to sum to 1 per sample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class AttributionError(ValueError):
    pass


class DegenerateImportanceWarning(RuntimeWarning):
    pass


@dataclass
class AttributionConfig:
    method: str = "IG"
    ig_steps: int = 32
    baseline: str = "zeros"

    def __post_init__(self):
        if self.method not in ("IG", "GS"):
            raise AttributionError(f"unknown attribution method {self.method!r}")
        if self.ig_steps < 1:
            raise AttributionError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if self.baseline not in ("zeros", "dataset-mean"):
            raise AttributionError(f"unknown baseline {self.baseline!r}")


@dataclass
class ImportanceVector:
    """``raw`` and ``normalized`` have shape (C,) or (N, C)."""

    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> ImportanceVector:
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw, normalize(raw))

    def __getitem__(self, i) -> ImportanceVector:
        return ImportanceVector(self.raw[i], self.normalized[i])


def normalize(raw) -> np.ndarray:
    """|raw| / sum|raw| along the last axis; all-zero rows become uniform (with a warning)."""
    a = np.abs(np.asarray(raw, dtype=np.float64))
    s = a.sum(axis=-1, keepdims=True)
    zero = s == 0
    if zero.any():
        warnings.warn("zero total attribution; using uniform importance", DegenerateImportanceWarning, stacklevel=2)
    c = a.shape[-1]
    return np.where(zero, 1.0 / c, a / np.where(zero, 1.0, s))


def channel_sum(attr: np.ndarray, batched: bool = True) -> np.ndarray:
    """Signed sum over every axis except the first (batch) and the last (channel)."""
    if batched:
        axes = tuple(range(1, attr.ndim - 1))
    else:
        axes = tuple(range(attr.ndim - 1))
    return attr.sum(axis=axes) if axes else attr


def _scalar_out(out: Tensor) -> Tensor:
    if out.ndim > 1:
        raise AttributionError(f"attribution target must be scalar per sample, got shape {out.shape}")
    return T.sum_(out) if out.size != 1 else T.reshape(out, ())


def input_gradient(f, x: np.ndarray) -> np.ndarray:
    """d f / d x for a batch (or single point) ``x``."""
    xt = Tensor(x, requires_grad=True)
    out = _scalar_out(f(xt))
    T.backward(out)
    return xt.grad if xt.grad is not None else np.zeros_like(x)


def path_gradients(f, x: np.ndarray, baseline: np.ndarray, steps: int) -> np.ndarray:
    """Mean gradient over the midpoints baseline + ((i - 1/2)/m)(x - baseline), i = 1..m.

    The midpoint rule keeps the quadrature error O(1/m^2), against O(1/m) for
    the left or right sums.  All m points go through ``f`` as one stacked batch.
    """
    if steps < 1:
        raise AttributionError(f"ig_steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    frac = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    frac = frac.reshape((steps,) + (1,) * x.ndim)
    pts = baseline + frac * (x - baseline)
    if x.ndim >= 2:
        n = x.shape[0]
        stacked = pts.reshape((steps * n,) + x.shape[1:])
        g = input_gradient(f, stacked).reshape(pts.shape)
    else:
        g = np.stack([input_gradient(f, p) for p in pts])
    return g.mean(axis=0)


def integrated_gradients(f, features, cfg: AttributionConfig | None = None, baseline=None, batched: bool = True) -> ImportanceVector:
    """Channel importance by Integrated Gradients (midpoint rule with ``cfg.ig_steps`` points).

    ``features`` is a batch (N, ..., C) when ``batched`` else a single sample (..., C).
    """
    cfg = cfg or AttributionConfig()
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if baseline is None:
        baseline = np.zeros_like(x)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape == x.shape[1:] and batched:
        baseline = np.broadcast_to(baseline, x.shape)
    if baseline.shape != x.shape:
        raise AttributionError(f"baseline shape {baseline.shape} does not match features {x.shape}")
    if batched:
        g = path_gradients(f, x, baseline, cfg.ig_steps)
    else:
        g = path_gradients(lambda t: _unbatched(f, t), x[None], baseline[None], cfg.ig_steps)[0]
    attr = (x - baseline) * g
    return ImportanceVector.from_raw(channel_sum(attr, batched))


def _unbatched(f, t: Tensor) -> Tensor:
    # f takes a single sample; evaluate it on each row and stack results
    outs = [f(T.reshape(T.index(t, i), t.shape[1:])) for i in range(t.shape[0])]
    return T.concat([T.reshape(o, (1,)) for o in outs], axis=0)


def gradient_saliency(f, features, batched: bool = True) -> ImportanceVector:
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if batched:
        g = input_gradient(f, x)
    else:
        g = input_gradient(lambda t: _unbatched(f, t), x[None])[0]
    return ImportanceVector.from_raw(channel_sum(np.abs(g), batched))


def attribute(f, features, cfg: AttributionConfig, baseline=None) -> ImportanceVector:
    if cfg.method == "IG":
        return integrated_gradients(f, features, cfg, baseline)
    return gradient_saliency(f, features)


def true_class_score(net, labels):
    """Target for attribution: the pre-softmax score of each sample's true class."""
    labels = np.asarray(labels, dtype=np.intp)

    def f(x: Tensor) -> Tensor:
        logits = net(x)
        # path_gradients stacks the m interpolation points step-major
        lab = np.tile(labels, logits.shape[0] // labels.size)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(lab.size), lab] = 1.0
        return T.sum_(T.mul(logits, onehot), axis=1)

    return f


def reference_predictions(ref_net, features: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return ref_net(Tensor(features)).data.argmax(axis=-1)


def gated_importance(ref_net, features, labels, cfg: AttributionConfig | None = None, classes: int | None = None, baseline=None):
    """Importance of a batch where the reference net is right; ``mask`` marks the kept samples.

    Returns ``(ImportanceVector over kept samples, mask)``.  A single sample
    (no batch axis in ``labels``) returns ``None`` when it is skipped.
    """
    cfg = cfg or AttributionConfig()
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    single = np.ndim(labels) == 0
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if single:
        x = x[None]
    classes = _classes_of(ref_net) if classes is None else classes
    if lab.min() < 0 or lab.max() >= classes:
        raise AttributionError(f"label out of range [0, {classes})")
    pred = reference_predictions(ref_net, x)
    mask = pred == lab
    if not mask.any():
        return (None if single else (None, mask))
    iv = attribute(true_class_score(ref_net, lab[mask]), x[mask], cfg, baseline)
    if single:
        return iv[0]
    return iv, mask


def _classes_of(net) -> int:
    return net.layers[-1].weight.shape[1]


def skewness(iv, k: int) -> float | np.ndarray:
    """Sum of the ``k`` largest normalized importances (per sample for batched input)."""
    norm = iv.normalized if isinstance(iv, ImportanceVector) else np.asarray(iv, dtype=np.float64)
    c = norm.shape[-1]
    if not 0 <= k < c:
        raise ValueError(f"k must be < C={c}, got {k}")
    top = -np.sort(-norm, axis=-1)[..., :k]
    s = top.sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s

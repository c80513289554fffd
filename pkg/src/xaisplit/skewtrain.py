"""Joint training that skews feature importance toward the first ``k`` channels.

Pipeline: warm up the extractor and both heads on the prediction loss, fit the
reference net on the extractor's features, pick the ``k`` channels most often
holding a sample's top-k importance, route them to the front with a channel
permutation, then train everything on

    lam * cross_entropy + (1 - lam) * (skewness_loss + disorder_loss)

Importance during training is Integrated Gradients of the reference net's
true-class score.  The path gradients are computed without a tape and held
constant, so the attribution ``(f - baseline) * g`` is linear in the features
and the ordering losses reach the extractor through ``f`` only.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from . import xai
from .codec import Quantizer, sigma_schedule
from .data import Dataset
from .nn import ExtractorConfig, ReferenceNet, SplitModel
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class SkewnessSpec:
    k: int = 2
    rho: float = 0.8
    lam: float = 0.3
    T: float = 6.0

    def validate(self, channels: int | None = None) -> SkewnessSpec:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.k < 1 or (channels is not None and self.k >= channels):
            raise ValueError(f"k must satisfy 1 <= k < C, got k={self.k}, C={channels}")
        return self


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 3
    batch_size: int = 64
    lr: float = 0.1
    weight_decay: float = 5e-4
    ig_steps: int = 32
    eval_ig_steps: int = 32
    levels: int = 8
    ref_width_mult: int = 4
    ref_min_acc: float = 0.9
    ref_max_epochs: int = 40
    ref_finetune: bool = True
    ref_lr: float = 0.02
    remote_width: int = 16
    extractor_bias_init: float = 0.1
    # joint L2 bound on each update's gradient; 0 disables
    clip_norm: float = 1.0
    seed: int = 0
    # test-set evaluation every n epochs (and always after the last one)
    eval_every: int = 1


# ----------------------------------------------------------------------- losses

def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _check_nonempty(v, what):
    n = v.shape[-1] if hasattr(v, "shape") else len(v)
    if n == 0:
        raise ValueError(f"{what} is empty")


def disorder_loss(I1, I2):
    """max(0, max(I2) - min(I1)) along the last axis.

    Tensors in, Tensor out (one value per row); arrays in, float or array out.
    """
    if _is_tensor(I1, I2):
        _check_nonempty(I1, "I1")
        _check_nonempty(I2, "I2")
        return T.relu(T.add(T.max_(I2, -1), T.neg(T.min_(I1, -1))))
    a, b = np.asarray(I1, dtype=np.float64), np.asarray(I2, dtype=np.float64)
    _check_nonempty(a, "I1")
    _check_nonempty(b, "I2")
    out = np.maximum(0.0, b.max(axis=-1) - a.min(axis=-1))
    return float(out) if out.ndim == 0 else out


def skewness_loss(I1, rho: float):
    """max(0, rho - |I1|_1) along the last axis."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if _is_tensor(I1):
        return T.relu(T.add(T.neg(T.sum_(I1, -1)), rho))
    a = np.asarray(I1, dtype=np.float64)
    out = np.maximum(0.0, rho - np.abs(a).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def descent_loss(I):
    """Squared L2 distance between I and I sorted in descending order (per row)."""
    if _is_tensor(I):
        order = np.argsort(-I.data, axis=-1, kind="stable")
        if I.ndim == 1:
            srt = T.gather(I, order, -1)
        else:
            # row-wise sort via flat gather
            n, c = I.shape
            flat = (order + np.arange(n)[:, None] * c).reshape(-1)
            srt = T.reshape(T.gather(T.reshape(I, (n * c,)), flat, 0), (n, c))
        d = T.add(I, T.neg(srt))
        return T.sum_(T.mul(d, d), -1)
    a = np.asarray(I, dtype=np.float64)
    srt = -np.sort(-a, axis=-1)
    out = ((a - srt) ** 2).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def combined_loss(pred_loss, skew, disorder, lam: float):
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if _is_tensor(pred_loss, skew, disorder):
        return T.add(T.mul(pred_loss, lam), T.mul(T.add(skew, disorder), 1.0 - lam))
    return lam * pred_loss + (1.0 - lam) * (skew + disorder)


# ----------------------------------------------------------------------- channel pre-selection

def channel_likelihood(importances, k: int) -> np.ndarray:
    """Fraction of samples whose top-k channels include each channel.

    A sample's top-k is taken by descending importance with the lower channel
    index winning ties.
    """
    imp = np.atleast_2d(np.asarray(importances, dtype=np.float64))
    n, c = imp.shape
    if n == 0:
        raise ValueError("empty training set")
    if not 1 <= k < c:
        raise ValueError(f"k must satisfy 1 <= k < C={c}")
    top = np.argsort(-imp, axis=1, kind="stable")[:, :k]
    # integer counts first, so the result does not depend on summation order
    return np.bincount(top.ravel(), minlength=c) / n


def rank_channels(p: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(p), kind="stable")[:k]


def select_channels(images, model: SplitModel, ref: ReferenceNet, labels, k: int, cfg: xai.AttributionConfig | None = None, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Returns (selected channel indices, per-channel likelihood)."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty training set")
    imp = importance_of(model, ref, images, labels, cfg or xai.AttributionConfig(), batch)
    p = channel_likelihood(imp, k)
    return rank_channels(p, k), p


def importance_of(model: SplitModel, ref: ReferenceNet, images, labels, cfg: xai.AttributionConfig, batch: int = 64) -> np.ndarray:
    """Normalized channel importance of every sample (no gating)."""
    out = []
    for s in range(0, len(images), batch):
        f = model.client_features(images[s:s + batch])
        iv = xai.attribute(xai.true_class_score(ref, labels[s:s + batch]), f, cfg)
        out.append(iv.normalized)
    return np.concatenate(out)


@dataclass
class MappingLayer:
    permutation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.permutation, dtype=np.intp)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ValueError("mapping must be a permutation of the channel indices")
        self.permutation = p

    @classmethod
    def front(cls, selected, channels: int) -> MappingLayer:
        sel = [int(i) for i in selected]
        return cls(np.array(sel + [c for c in range(channels) if c not in sel]))

    def __call__(self, f):
        if isinstance(f, Tensor):
            return T.gather(f, self.permutation, -1)
        return np.asarray(f)[..., self.permutation]


# ----------------------------------------------------------------------- training loop

def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


@contextmanager
def _diverge_guard(stage: str):
    try:
        yield
    except NonFiniteError as e:
        raise DivergenceError(f"non-finite values during {stage}: {e}") from e


def _check_finite(**parts):
    for name, v in parts.items():
        if not np.isfinite(v):
            raise DivergenceError(f"non-finite {name} loss ({v})")


def _ref_step(ref: ReferenceNet, feats: np.ndarray, labels: np.ndarray, lr: float, wd: float, clip: float = 0.0) -> float:
    with _diverge_guard("reference training"):
        loss = T.cross_entropy(ref(Tensor(feats)), labels)
    _check_finite(reference=loss.item())
    T.backward(loss)
    T.clip_grad_norm(ref.parameters(), clip)
    T.sgd_step(ref.parameters(), lr, wd)
    return loss.item()


def train_reference(ref: ReferenceNet, model: SplitModel, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> float:
    """Fit the reference net on frozen extractor features until it reaches ``ref_min_acc``."""
    with _diverge_guard("reference training"):
        feats = model.client_features(data.images)
        acc = accuracy(ref_logits(ref, feats), data.labels)
    epochs = 0
    while acc < cfg.ref_min_acc and epochs < cfg.ref_max_epochs:
        for idx in _batches(len(data), cfg.batch_size, rng):
            _ref_step(ref, feats[idx], data.labels[idx], cfg.lr, cfg.weight_decay, cfg.clip_norm)
        acc = accuracy(ref_logits(ref, feats), data.labels)
        epochs += 1
    log.info("reference net: %.3f train accuracy after %d extra epochs", acc, epochs)
    return acc


def ref_logits(ref: ReferenceNet, feats: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return ref(Tensor(feats)).data


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.asarray(logits).argmax(axis=-1) == labels).mean())


def warmup(model: SplitModel, ref: ReferenceNet, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> None:
    """Prediction-loss-only epochs for extractor + heads; the reference net trains on detached features."""
    for _ in range(cfg.warmup_epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            x, y = data.images[idx], data.labels[idx]
            with _diverge_guard("warmup"):
                f, _, _, out = model.forward_train(x)
                loss = T.cross_entropy(out, y)
                _check_finite(prediction=loss.item())
                T.backward(loss)
                T.sgd_step(model.parameters(), cfg.lr, cfg.weight_decay)
                _ref_step(ref, f.data, y, cfg.lr, cfg.weight_decay)


def init_quantizer(model: SplitModel, data: Dataset, levels: int) -> Quantizer:
    """Centers spread uniformly over the observed range of the remote-bound channels."""
    f = model.client_features(data.images)
    rest = f[..., model.k:]
    q = Quantizer.uniform(float(rest.min()), float(rest.max()), levels)
    model.centers = Tensor(q.centers, requires_grad=True)
    return q


def _keep_sorted(centers: Tensor) -> None:
    c = np.sort(centers.data)
    for i in range(1, c.size):
        if c[i] <= c[i - 1]:
            c[i] = c[i - 1] + 1e-6
    centers.data = c


def ordering_losses(f: Tensor, grads: np.ndarray, k: int, rho: float, baseline=None):
    """Per-sample (importance, skewness loss, disorder loss) with constant path gradients."""
    diff = f if baseline is None else T.add(f, T.neg(Tensor(baseline)))
    attr = T.mul(diff, Tensor(grads))
    raw = T.sum_(attr, axis=tuple(range(1, f.ndim - 1))) if f.ndim > 2 else attr
    imp = T.row_normalize(T.abs_(raw))
    c = imp.shape[-1]
    I1 = T.gather(imp, np.arange(k), -1)
    I2 = T.gather(imp, np.arange(k, c), -1)
    return imp, skewness_loss(I1, rho), disorder_loss(I1, I2)


def train_step(model: SplitModel, ref: ReferenceNet, x, y, spec: SkewnessSpec, cfg: TrainConfig) -> dict:
    with _diverge_guard("joint training"):
        return _train_step(model, ref, x, y, spec, cfg)


def _train_step(model: SplitModel, ref: ReferenceNet, x, y, spec: SkewnessSpec, cfg: TrainConfig) -> dict:
    f, _, _, out = model.forward_train(x)
    pred = T.cross_entropy(out, y)
    fd = f.data
    keep = ref_logits(ref, fd).argmax(axis=-1) == y
    stats = {"pred": pred.item(), "skew": 0.0, "disorder": 0.0, "kept": int(keep.sum()), "n": len(y),
             "correct": int((out.data.argmax(-1) == y).sum())}
    if keep.any():
        kidx = np.flatnonzero(keep)
        grads = xai.path_gradients(xai.true_class_score(ref, y[kidx]), fd[kidx], np.zeros_like(fd[kidx]), cfg.ig_steps)
        _, skew, dis = ordering_losses(T.gather(f, kidx, 0), grads, spec.k, spec.rho)
        skew, dis = T.mean(skew), T.mean(dis)
        stats["skew"], stats["disorder"] = skew.item(), dis.item()
        loss = combined_loss(pred, skew, dis, spec.lam)
    else:
        loss = T.mul(pred, spec.lam)
    stats["total"] = loss.item()
    _check_finite(prediction=stats["pred"], skewness=stats["skew"], disorder=stats["disorder"])
    T.backward(loss)
    T.clip_grad_norm(model.parameters(), cfg.clip_norm)
    T.sgd_step(model.parameters(), cfg.lr, cfg.weight_decay)
    if model.centers is not None:
        _keep_sorted(model.centers)
    if cfg.ref_finetune:
        _ref_step(ref, fd, y, cfg.ref_lr, cfg.weight_decay, cfg.clip_norm)
    return stats


@dataclass
class EvalStats:
    accuracy: float
    importance: np.ndarray
    skewness: np.ndarray
    disorder: np.ndarray
    ref_accuracy: float

    @property
    def mean_skewness(self) -> float:
        return float(self.skewness.mean())

    @property
    def disorder_rate(self) -> float:
        return float(self.disorder.mean())


def evaluate(model: SplitModel, ref: ReferenceNet, data: Dataset, k: int, ig_steps: int = 128, method: str = "IG") -> EvalStats:
    """Hard-quantized accuracy plus per-sample achieved skewness and disorder flags."""
    was = model.trained
    model.trained = True
    try:
        acc = accuracy(model.logits(data.images), data.labels)
    finally:
        model.trained = was
    imp = importance_of(model, ref, data.images, data.labels, xai.AttributionConfig(method, ig_steps))
    skew = xai.skewness(imp, k)
    dis = imp[:, k:].max(axis=1) > imp[:, :k].min(axis=1)
    ref_acc = accuracy(ref_logits(ref, model.client_features(data.images)), data.labels)
    return EvalStats(acc, imp, np.atleast_1d(skew), dis, ref_acc)


@dataclass
class TrainResult:
    model: SplitModel
    ref: ReferenceNet
    selected: np.ndarray
    likelihood: np.ndarray
    log: list[dict] = field(default_factory=list)
    ref_accuracy: float = 0.0


def joint_train(model: SplitModel, ref: ReferenceNet, spec: SkewnessSpec, train: Dataset, test: Dataset | None,
                cfg: TrainConfig, rng: np.random.Generator, on_epoch=None) -> list[dict]:
    spec.validate(model.channels)
    records = []
    for epoch in range(cfg.epochs):
        model.sigma = sigma_schedule(epoch)
        tot = {"pred": 0.0, "skew": 0.0, "disorder": 0.0, "total": 0.0}
        kept = n = correct = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            s = train_step(model, ref, train.images[idx], train.labels[idx], spec, cfg)
            for key in tot:
                tot[key] += s[key] * s["n"]
            kept += s["kept"]
            n += s["n"]
            correct += s["correct"]
        rec = {
            "epoch": epoch + 1,
            "train_acc": correct / n,
            "alpha": model.alpha,
            "sigma": model.sigma,
            "gated_frac": kept / n,
            "loss_pred": tot["pred"] / n,
            "loss_skew": tot["skew"] / n,
            "loss_disorder": tot["disorder"] / n,
            "loss_total": tot["total"] / n,
        }
        # the gated fraction is the reference net's accuracy on this epoch's features;
        # refit it once the extractor has drifted too far for the per-batch fine-tuning
        if cfg.ref_finetune and kept / n < cfg.ref_min_acc:
            rec["ref_refit_acc"] = train_reference(ref, model, train, cfg, rng)
        last = epoch == cfg.epochs - 1
        if test is not None and (last or (epoch + 1) % cfg.eval_every == 0):
            with _diverge_guard("evaluation"):
                ev = evaluate(model, ref, test, spec.k, cfg.eval_ig_steps)
            rec.update(test_acc=ev.accuracy, mean_skewness=ev.mean_skewness, disorder_rate=ev.disorder_rate,
                       ref_acc=ev.ref_accuracy)
        records.append(rec)
        log.info("epoch %(epoch)d  acc %(train_acc).3f  loss %(loss_total).4f", rec)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def train_pipeline(train: Dataset, test: Dataset | None, ext_cfg: ExtractorConfig, spec: SkewnessSpec,
                   cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Warmup, reference fit, channel selection, mapping layer, joint training, mapping fold."""
    spec.validate(ext_cfg.channels_out)
    rng = np.random.default_rng(cfg.seed)
    ext_cfg = fit_input_norm(ext_cfg, train)
    model = SplitModel.build(ext_cfg, spec.k, train.classes, seed=cfg.seed, temperature=spec.T,
                             remote_width=cfg.remote_width, bias_init=cfg.extractor_bias_init)
    ref = ReferenceNet(ext_cfg.channels_out, train.classes, np.random.default_rng(cfg.seed + 1), cfg.ref_width_mult)
    warmup(model, ref, train, cfg, rng)
    ref_acc = train_reference(ref, model, train, cfg, rng)
    with _diverge_guard("channel selection"):
        selected, p = select_channels(train.images, model, ref, train.labels, spec.k,
                                      xai.AttributionConfig("IG", cfg.ig_steps))
    install_mapping(model, ref, MappingLayer.front(selected, model.channels))
    init_quantizer(model, train, cfg.levels)
    records = joint_train(model, ref, spec, train, test, cfg, rng, on_epoch)
    # a pure permutation folds into the last conv at no inference cost
    model.fold_mapping()
    model.trained = True
    return TrainResult(model, ref, selected, p, records, ref_acc)


def fit_input_norm(cfg: ExtractorConfig, data: Dataset) -> ExtractorConfig:
    std = float(data.images.std())
    return replace(cfg, input_mean=float(data.images.mean()), input_std=std if std > 0 else 1.0)


def install_mapping(model: SplitModel, ref: ReferenceNet, mapping: MappingLayer) -> None:
    """Route the selected channels to the front; the reference net's input is permuted to match."""
    model.mapping = mapping.permutation
    first = ref.layers[0].weight
    first.data = first.data[:, :, mapping.permutation, :]


def spec_dict(spec: SkewnessSpec) -> dict:
    return asdict(spec)

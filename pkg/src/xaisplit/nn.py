"""Networks of the split pipeline and the weighted prediction combiner.

``SplitModel`` holds a convolutional feature extractor, a local head reading the
first ``k`` feature channels, a remote head reading the remaining ``C - k``
channels after quantization, and a trainable weight ``alpha(w; T)`` that mixes
the two heads' logits.  ``ReferenceNet`` is the wider head used only during
training to score feature importance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class ExtractorConfig:
    input_shape: tuple[int, int, int] = (16, 16, 1)
    channels_out: int = 8
    conv_layers: int = 2
    kernel: int = 3
    # stride of the last conv layer; earlier layers use stride 1
    last_stride: int = 2
    # fixed input standardization (x - mean) / std, fit on the training set
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.conv_layers < 1:
            raise ValueError("extractor needs at least one conv layer")
        if self.channels_out < 2:
            raise ValueError("extractor needs at least two output channels")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be H x W x Cin, got {self.input_shape}")
        if self.input_std <= 0:
            raise ValueError("input_std must be positive")


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: str = "valid"):
        self.weight = Tensor(he_normal(rng, (k, k, cin, cout), k * k * cin), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.bias_add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def flops(self, in_shape):
        k, _, _, cout = self.weight.shape
        return T.conv2d_flops(in_shape, k, cout, self.stride, self.padding)


class Dense:
    def __init__(self, fin: int, fout: int, rng: np.random.Generator):
        self.weight = Tensor(rng.standard_normal((fin, fout)) * math.sqrt(1.0 / fin), requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.bias_add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def flops(self) -> int:
        fin, fout = self.weight.shape
        return 2 * fin * fout


def global_avg_pool(x: Tensor) -> Tensor:
    return T.mean(x, axis=(1, 2))


class _Net:
    """Shared parameter plumbing; subclasses list their layers in ``layers``."""

    layers: list

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight.data
            out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    def load_state(self, prefix: str, blobs: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias"):
                key = f"{prefix}.{i}.{name}"
                if key not in blobs:
                    raise KeyError(f"missing weight blob {key!r}")
                getattr(layer, name).data = blobs[key]


class Extractor(_Net):
    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator, bias_init: float = 0.0):
        self.cfg = cfg
        cin = cfg.input_shape[2]
        self.layers = []
        for i in range(cfg.conv_layers):
            stride = cfg.last_stride if i == cfg.conv_layers - 1 else 1
            conv = Conv2d(cin, cfg.channels_out, cfg.kernel, rng, stride=stride)
            conv.bias.data = np.full(cfg.channels_out, bias_init)
            self.layers.append(conv)
            cin = cfg.channels_out

    def __call__(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ShapeError(f"extractor expects N x {self.cfg.input_shape}, got {x.shape}")
        if self.cfg.input_mean != 0.0 or self.cfg.input_std != 1.0:
            x = T.mul(T.add(x, -self.cfg.input_mean), 1.0 / self.cfg.input_std)
        for layer in self.layers:
            x = T.relu(layer(x))
        return x

    def output_shape(self) -> tuple[int, int, int]:
        return self.flops_and_shape()[1]

    def flops_and_shape(self):
        shape = self.cfg.input_shape
        total = 0
        for layer in self.layers:
            f, shape = layer.flops(shape)
            total += f
        return total, shape


class LocalHead(_Net):
    """Global average pooling followed by one dense layer."""

    def __init__(self, k: int, classes: int, rng: np.random.Generator):
        self.layers = [Dense(k, classes, rng)]

    def __call__(self, feats: Tensor) -> Tensor:
        return self.layers[0](global_avg_pool(feats))

    def flops(self, in_shape) -> int:
        h, w, c = in_shape
        return h * w * c + self.layers[0].flops()


class ConvHead(_Net):
    """``depth`` same-padded 3x3 conv layers, global average pooling and a dense classifier."""

    def __init__(self, cin: int, width: int, classes: int, rng: np.random.Generator, depth: int = 3):
        self.layers = []
        c = cin
        for _ in range(depth):
            self.layers.append(Conv2d(c, width, 3, rng, padding="same"))
            c = width
        self.layers.append(Dense(width, classes, rng))

    def __call__(self, feats: Tensor) -> Tensor:
        x = feats
        for conv in self.layers[:-1]:
            x = T.relu(conv(x))
        return self.layers[-1](global_avg_pool(x))

    def flops(self, in_shape) -> int:
        total = 0
        shape = tuple(in_shape)
        for conv in self.layers[:-1]:
            f, shape = conv.flops(shape)
            total += f
        h, w, c = shape
        return total + h * w * c + self.layers[-1].flops()


class RemoteHead(ConvHead):
    def __init__(self, cin: int, classes: int, rng: np.random.Generator, width: int = 16):
        super().__init__(cin, width, classes, rng, depth=3)


class ReferenceNet(ConvHead):
    """Wide head over all C feature channels, used to score feature importance."""

    def __init__(self, channels: int, classes: int, rng: np.random.Generator, width_mult: int = 4):
        super().__init__(channels, width_mult * channels, classes, rng, depth=1)


def alpha(w: float, temperature: float) -> float:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = w / temperature
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def combine(local_logits, remote_logits, a):
    """``a * local + (1 - a) * remote``.  ``a`` may be a float or a size-1 Tensor."""
    if isinstance(local_logits, Tensor) or isinstance(remote_logits, Tensor) or isinstance(a, Tensor):
        lt, rt = T._as_tensor(local_logits), T._as_tensor(remote_logits)
        if lt.shape != rt.shape:
            raise ShapeError(f"combine: local {lt.shape} vs remote {rt.shape}")
        return T.add(T.mul(lt, a), T.mul(rt, T.add(T.neg(a) if isinstance(a, Tensor) else -a, 1.0)))
    lo = np.asarray(local_logits, dtype=np.float64)
    re = np.asarray(remote_logits, dtype=np.float64)
    if lo.shape != re.shape:
        raise ShapeError(f"combine: local {lo.shape} vs remote {re.shape}")
    return a * lo + (1.0 - a) * re


@dataclass
class FeatureVector:
    values: np.ndarray
    importance: np.ndarray | None = None

    def __post_init__(self):
        if self.importance is not None:
            imp = np.asarray(self.importance, dtype=np.float64)
            if (imp < 0).any() or not np.allclose(imp.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
                raise ValueError("importance must be non-negative and sum to 1")
            self.importance = imp

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


def split_features(f, k: int):
    """Positional split into channels ``[0, k)`` and ``[k, C)``."""
    values = f.values if isinstance(f, FeatureVector) else f
    c = values.shape[-1]
    if not 1 <= k < c:
        raise ValueError(f"k must satisfy 1 <= k < C={c}, got {k}")
    if isinstance(values, Tensor):
        return T.gather(values, np.arange(k), -1), T.gather(values, np.arange(k, c), -1)
    return values[..., :k], values[..., k:]


@dataclass
class SplitModel:
    extractor: Extractor
    local: LocalHead
    remote: RemoteHead
    k: int
    classes: int
    temperature: float = 6.0
    w: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))
    centers: Tensor | None = None
    # soft-quantization sharpness used in the training forward pass
    sigma: float = 1.0
    # training-only channel permutation; None once folded into the extractor
    mapping: np.ndarray | None = None
    trained: bool = False

    def __post_init__(self):
        c = self.extractor.cfg.channels_out
        if not 1 <= self.k < c:
            raise ValueError(f"k must satisfy 1 <= k < C={c}, got {self.k}")
        if self.local.layers[0].weight.shape[0] != self.k:
            raise ShapeError("local head input width must equal k")
        if self.remote.layers[0].weight.shape[2] != c - self.k:
            raise ShapeError("remote head input width must equal C - k")

    @classmethod
    def build(cls, cfg: ExtractorConfig, k: int, classes: int, seed: int, temperature: float = 6.0,
              remote_width: int = 16, bias_init: float = 0.0):
        rng = np.random.default_rng(seed)
        ext = Extractor(cfg, rng, bias_init)
        local = LocalHead(k, classes, rng)
        remote = RemoteHead(cfg.channels_out - k, classes, rng, width=remote_width)
        return cls(ext, local, remote, k, classes, temperature)

    @property
    def channels(self) -> int:
        return self.extractor.cfg.channels_out

    @property
    def alpha(self) -> float:
        return alpha(float(self.w.data[0]), self.temperature)

    def center_gap(self) -> float:
        """Mean spacing of the quantizer centers; the soft-quantization sharpness is measured in these units."""
        c = self.centers.data
        return float((c[-1] - c[0]) / (c.size - 1))

    def alpha_tensor(self) -> Tensor:
        return T.sigmoid(T.mul(self.w, 1.0 / self.temperature))

    def parameters(self) -> list[Tensor]:
        ps = self.extractor.parameters() + self.local.parameters() + self.remote.parameters() + [self.w]
        if self.centers is not None and self.centers.requires_grad:
            ps.append(self.centers)
        return ps

    def features(self, x) -> Tensor:
        """Extractor output with the mapping layer applied (if still installed)."""
        f = self.extractor(T._as_tensor(x))
        if self.mapping is not None:
            f = T.gather(f, self.mapping, -1)
        return f

    def forward_train(self, x):
        """Differentiable forward pass; returns (features, local, remote, combined) logits."""
        f = self.features(x)
        top, rest = split_features(f, self.k)
        if self.centers is not None:
            rest = T.soft_quantize(rest, self.centers, self.sigma / self.center_gap() ** 2)
        lo = self.local(top)
        re = self.remote(rest)
        return f, lo, re, combine(lo, re, self.alpha_tensor())

    # ------------------------------------------------------------------ inference halves

    def _check_ready(self):
        if not self.trained:
            raise UntrainedModelError("model has not been trained or loaded")

    def client_features(self, x) -> np.ndarray:
        with T.no_grad():
            return self.features(x).data

    def local_logits(self, top: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.local(Tensor(top)).data

    def remote_logits(self, rest: np.ndarray) -> np.ndarray:
        """Remote head on already-dequantized features."""
        with T.no_grad():
            return self.remote(Tensor(rest)).data

    def hard_quantize(self, rest: np.ndarray) -> np.ndarray:
        if self.centers is None:
            return rest
        from .codec import Quantizer

        q = Quantizer(self.centers.data)
        return q.dequantize(q.quantize(rest)).reshape(rest.shape)

    def logits(self, x) -> np.ndarray:
        """In-process inference pipeline with hard quantization of the remote features."""
        self._check_ready()
        f = self.client_features(x)
        top, rest = split_features(f, self.k)
        return combine(self.local_logits(top), self.remote_logits(self.hard_quantize(rest)), self.alpha)

    def fold_mapping(self) -> None:
        """Bake the channel permutation into the last conv layer and drop the mapping layer."""
        if self.mapping is None:
            return
        last = self.extractor.layers[-1]
        last.weight.data = last.weight.data[..., self.mapping]
        last.bias.data = last.bias.data[self.mapping]
        self.mapping = None

    def flops(self) -> dict[str, int]:
        ext, shape = self.extractor.flops_and_shape()
        h, w, c = shape
        return {
            "extract": ext,
            "local": self.local.flops((h, w, self.k)),
            "remote": self.remote.flops((h, w, c - self.k)),
        }


def predict(model: SplitModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and softmax confidences of the combined prediction."""
    z = model.logits(x)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return z.argmax(axis=-1), e / e.sum(axis=-1, keepdims=True)

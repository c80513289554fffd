"""Datasets (synthetic, IDX, CSV) and the binary model archive.

Archive layout, all integers big-endian::

    8 bytes   magic  b"XSPLARC\\0"
    u8        format version
    u32       manifest length, then the manifest as canonical JSON (sorted keys)
    per blob, in manifest["blobs"] order:
        u16 name length, name (utf-8), u8 ndim, u32 x ndim dims, float64 data
    32 bytes  SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ExtractorConfig, ReferenceNet, SplitModel

TASKS = ("radial", "xor-grid", "stripe")
ARCHIVE_MAGIC = b"XSPLARC\x00"
ARCHIVE_VERSION = 1


class DataError(ValueError):
    pass


class ArchiveError(ValueError):
    pass


class ChecksumError(ArchiveError):
    pass


class ArchiveConfigError(ArchiveError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x H x W x Cin, got shape {self.images.shape}")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise DataError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"labels must lie in [0, {self.classes})")
        _reject_nonfinite(self.images, "images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split)


def _reject_nonfinite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"non-finite value in {what} at index {loc}")


# ----------------------------------------------------------------------- synthetic tasks

def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _radial(rng, labels, size, classes):
    # ring radius band encodes the class
    yy, xx = _grid(size)
    rmin, rmax = 1.5, size / 2 - 1.0
    band = (rmax - rmin) / classes
    out = np.empty((len(labels), size, size))
    for i, c in enumerate(labels):
        cy, cx = size / 2 + rng.uniform(-1.0, 1.0, 2)
        r = rmin + band * (c + rng.uniform(0.2, 0.8))
        d = np.hypot(yy - cy, xx - cx)
        out[i] = np.exp(-((d - r) ** 2) / (2 * 0.6 ** 2))
    return out


def _xor_grid(rng, labels, size, classes):
    # two XOR bits over the four quadrants; extra classes repeat the pattern with a brightness shift
    h = size // 2
    out = np.empty((len(labels), size, size))
    for i, c in enumerate(labels):
        a, b = (c >> 1) & 1, c & 1
        tl, tr = rng.integers(0, 2, 2)
        br, bl = tl ^ a, tr ^ b
        img = np.zeros((size, size))
        img[:h, :h], img[:h, h:], img[h:, :h], img[h:, h:] = tl, tr, bl, br
        img = 0.2 + 0.6 * img + 0.1 * (c // 4)
        out[i] = img
    return out


def _stripe(rng, labels, size, classes):
    # stripe orientation encodes the class
    yy, xx = _grid(size)
    out = np.empty((len(labels), size, size))
    for i, c in enumerate(labels):
        theta = np.pi * c / classes + rng.uniform(-0.1, 0.1)
        period = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        out[i] = 0.5 + 0.5 * np.sin(2 * np.pi * proj / period + phase)
    return out


_GENERATORS = {"radial": _radial, "xor-grid": _xor_grid, "stripe": _stripe}


def gen_synthetic(task: str, n: int, seed: int, classes: int = 4, size: int = 16, noise: float = 0.1, split: str = "train") -> Dataset:
    """Deterministic class-balanced synthetic images of shape size x size x 1 in [0, 1]."""
    if task not in _GENERATORS:
        raise DataError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    imgs = _GENERATORS[task](rng, labels, size, classes)
    imgs = np.clip(imgs + noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
    return Dataset(imgs[..., None], labels, classes, split)


def train_test(task: str, n_train: int, n_test: int, seed: int, **kw) -> tuple[Dataset, Dataset]:
    return (gen_synthetic(task, n_train, seed, split="train", **kw),
            gen_synthetic(task, n_test, seed + 10_000, split="test", **kw))


# ----------------------------------------------------------------------- IDX / CSV

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file shorter than the 4-byte IDX magic")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise DataError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_TYPES[dtype_code])
    expected = header + int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)
    return arr


def load_idx(images_path, labels_path=None, classes: int | None = None, split: str = "train") -> Dataset:
    """IDX images (N x H x W or N x H x W x C) with an optional IDX label file."""
    arr = read_idx(images_path)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DataError(f"{images_path}: expected 3 or 4 dims, got {arr.ndim}")
    imgs = _scale(arr.astype(np.float64), str(images_path))
    if labels_path is None:
        labels = np.zeros(len(imgs), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if len(labels) != len(imgs):
            raise DataError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images")
    classes = classes or int(labels.max()) + 1
    return Dataset(imgs, labels, classes, split)


def _scale(arr: np.ndarray, where: str) -> np.ndarray:
    _reject_nonfinite(arr, where)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        if arr.min() < 0 or arr.max() > 255:
            raise DataError(f"{where}: values outside [0, 255]")
        arr = arr / 255.0
    return arr


def load_csv(path, shape: tuple[int, int, int] | None = None, classes: int | None = None, split: str = "train") -> Dataset:
    """Headerless rows ``label,p0,p1,...``; pixel values in [0,1] or [0,255]."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if shape is None:
                    side = int(round((width - 1) ** 0.5))
                    if side * side != width - 1:
                        raise DataError(f"{path}: cannot infer a square image from {width - 1} pixels; pass shape")
                    shape = (side, side, 1)
                if width != int(np.prod(shape)) + 1:
                    raise DataError(f"{path}: row {lineno} has {width} fields, expected {int(np.prod(shape)) + 1}")
            elif len(parts) != width:
                raise DataError(f"{path}: row {lineno} has {len(parts)} fields, expected {width}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            bad = [i for i, v in enumerate(vals) if not np.isfinite(v)]
            if bad:
                raise DataError(f"{path}: non-finite value at row {lineno}, column {bad[0] + 1}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no rows")
    data = np.asarray(rows)
    labels = data[:, 0].astype(np.int64)
    imgs = _scale(data[:, 1:], str(path)).reshape((len(rows),) + tuple(shape))
    classes = classes or int(labels.max()) + 1
    return Dataset(imgs, labels, classes, split)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for img, lab in zip(ds.images, ds.labels):
            fh.write(",".join([str(int(lab))] + [repr(float(v)) for v in img.reshape(-1)]) + "\n")


def write_idx(arr: np.ndarray, path, dtype_code: int = 0x08) -> None:
    dt = np.dtype(_IDX_TYPES[dtype_code])
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, dtype_code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dt).tobytes())


# ----------------------------------------------------------------------- archive

@dataclass
class ModelArchive:
    manifest: dict
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest = dict(self.manifest)
        manifest["blobs"] = sorted(self.blobs)
        mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        parts = [ARCHIVE_MAGIC, bytes([ARCHIVE_VERSION]), struct.pack(">I", len(mjson)), mjson]
        for name in manifest["blobs"]:
            arr = np.ascontiguousarray(self.blobs[name], dtype=">f8")
            nb = name.encode()
            parts.append(struct.pack(">H", len(nb)) + nb)
            parts.append(struct.pack(f">B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> ModelArchive:
        if len(raw) < len(ARCHIVE_MAGIC) + 1 + 4 + 32 or raw[:8] != ARCHIVE_MAGIC:
            raise ArchiveError("not a model archive (bad magic)")
        body, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("archive checksum mismatch")
        version = body[8]
        if version != ARCHIVE_VERSION:
            raise ArchiveError(f"archive format version {version}, this build reads {ARCHIVE_VERSION}")
        (mlen,) = struct.unpack_from(">I", body, 9)
        pos = 13 + mlen
        manifest = json.loads(body[13:pos])
        blobs = {}
        for name in manifest["blobs"]:
            (nlen,) = struct.unpack_from(">H", body, pos)
            pos += 2
            got = body[pos:pos + nlen].decode()
            pos += nlen
            if got != name:
                raise ArchiveError(f"blob order mismatch: expected {name!r}, found {got!r}")
            ndim = body[pos]
            dims = struct.unpack_from(f">{ndim}I", body, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype=">f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
            blobs[name] = arr
        if pos != len(body):
            raise ArchiveError(f"{len(body) - pos} trailing bytes after the last blob")
        manifest.pop("blobs")
        return cls(manifest, blobs)


def archive_model(model: SplitModel, ref: ReferenceNet | None = None, extra: dict | None = None) -> ModelArchive:
    cfg = model.extractor.cfg
    manifest = {
        "format": "xaisplit-model",
        "extractor": {
            "input_shape": list(cfg.input_shape),
            "channels_out": cfg.channels_out,
            "conv_layers": cfg.conv_layers,
            "kernel": cfg.kernel,
            "last_stride": cfg.last_stride,
            "input_mean": cfg.input_mean,
            "input_std": cfg.input_std,
        },
        "k": model.k,
        "classes": model.classes,
        "temperature": model.temperature,
        "remote_width": model.remote.layers[0].weight.shape[3],
        "trained": model.trained,
        "has_reference": ref is not None,
        "reference_width": ref.layers[0].weight.shape[3] if ref is not None else 0,
    }
    if model.mapping is not None:
        manifest["mapping"] = [int(i) for i in model.mapping]
    manifest.update(extra or {})
    blobs = {}
    blobs.update(model.extractor.state("extractor"))
    blobs.update(model.local.state("local"))
    blobs.update(model.remote.state("remote"))
    blobs["combiner.w"] = model.w.data
    if model.centers is not None:
        blobs["quantizer.centers"] = model.centers.data
    if ref is not None:
        blobs.update(ref.state("reference"))
    return ModelArchive(manifest, {k: np.array(v) for k, v in blobs.items()})


def restore_model(arch: ModelArchive, expect_k: int | None = None):
    """Rebuild (SplitModel, ReferenceNet or None) from an archive."""
    m = arch.manifest
    if m.get("format") != "xaisplit-model":
        raise ArchiveError("archive does not hold a split model")
    if expect_k is not None and m["k"] != expect_k:
        raise ArchiveConfigError(f"archive was trained with k={m['k']}, runtime expects k={expect_k}")
    e = m["extractor"]
    cfg = ExtractorConfig(tuple(e["input_shape"]), e["channels_out"], e["conv_layers"], e["kernel"], e["last_stride"],
                          e["input_mean"], e["input_std"])
    model = SplitModel.build(cfg, m["k"], m["classes"], seed=0, temperature=m["temperature"], remote_width=m["remote_width"])
    model.extractor.load_state("extractor", arch.blobs)
    model.local.load_state("local", arch.blobs)
    model.remote.load_state("remote", arch.blobs)
    model.w.data = arch.blobs["combiner.w"]
    if "quantizer.centers" in arch.blobs:
        from .tensor import Tensor

        model.centers = Tensor(arch.blobs["quantizer.centers"])
    if "mapping" in m:
        model.mapping = np.asarray(m["mapping"], dtype=np.intp)
    model.trained = bool(m["trained"])
    ref = None
    if m.get("has_reference"):
        ref = _reference_like(cfg.channels_out, m["classes"], m["reference_width"])
        ref.load_state("reference", arch.blobs)
    return model, ref


def _reference_like(channels: int, classes: int, width: int) -> ReferenceNet:
    if width % channels:
        raise ArchiveError(f"reference width {width} is not a multiple of {channels} channels")
    return ReferenceNet(channels, classes, np.random.default_rng(0), width_mult=width // channels)


def save_model(model: SplitModel, path, ref: ReferenceNet | None = None, extra: dict | None = None) -> bytes:
    raw = archive_model(model, ref, extra).to_bytes()
    Path(path).write_bytes(raw)
    return raw


def load_model(path, expect_k: int | None = None):
    """Returns (model, reference net or None, manifest)."""
    arch = ModelArchive.from_bytes(Path(path).read_bytes())
    model, ref = restore_model(arch, expect_k)
    return model, ref, arch.manifest

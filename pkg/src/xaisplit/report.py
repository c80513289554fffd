"""Run reports: JSON documents written by train/eval/offload, and their aggregation.

Every document carries the resolved config and seed of the run that produced
it.  Aggregation is a pure function of the input documents, so the CSV, JSON
and table outputs are byte-identical for identical inputs.  Figures are an
optional extra and need matplotlib.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .codec import Quantizer, compress_features, compression_ratio
from .data import Dataset
from .nn import ReferenceNet, SplitModel, split_features
from .skewtrain import evaluate

REPORT_VERSION = 1
KINDS = ("train", "eval", "offload")

QUALITY_COLUMNS = ["k", "rho", "runs", "accuracy", "mean_skewness", "disorder_rate", "mean_payload_bytes",
                   "compression_ratio"]
LATENCY_COLUMNS = ["mode", "bandwidth_bps", "runs", "n", "accuracy", "mean_t_total", "p95_t_total", "mean_t_serial",
                   "mean_t_tx", "mean_payload_bytes", "fallback_rate"]
TRAINING_COLUMNS = ["k", "rho", "seed", "epochs", "train_acc", "test_acc", "mean_skewness", "disorder_rate",
                    "loss_total", "alpha"]


class ReportError(ValueError):
    pass


class EmptyReportError(ReportError):
    pass


class SchemaError(ReportError):
    pass


# ----------------------------------------------------------------------- documents


def make_report(kind: str, config: dict, seed: int, summary, records=None) -> dict:
    if kind not in KINDS:
        raise ValueError(f"unknown report kind {kind!r}")
    doc = {"version": REPORT_VERSION, "kind": kind, "seed": int(seed), "config": config, "summary": summary}
    if records is not None:
        doc["records"] = records
    return doc


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable, allow_nan=False) + "\n"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def validate(doc, source: str = "<report>") -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: top level must be an object")
    missing = [key for key in ("version", "kind", "seed", "config", "summary") if key not in doc]
    if missing:
        raise SchemaError(f"{source}: missing field(s) {', '.join(missing)}")
    if doc["version"] != REPORT_VERSION:
        raise SchemaError(f"{source}: report version {doc['version']} (expected {REPORT_VERSION})")
    if doc["kind"] not in KINDS:
        raise SchemaError(f"{source}: unknown kind {doc['kind']!r}")
    if doc["kind"] in ("train", "eval") and "spec" not in doc["config"]:
        raise SchemaError(f"{source}: config has no spec section")
    if doc["kind"] == "train" and not doc.get("records"):
        raise SchemaError(f"{source}: training report without epoch records")
    if doc["kind"] == "offload" and not isinstance(doc["summary"].get("runs"), list):
        raise SchemaError(f"{source}: offload summary needs a 'runs' list")
    return doc


def read_report(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from None
    return validate(doc, str(path))


# ----------------------------------------------------------------------- metrics


def skewness_cdf(values, points: int = 21) -> list[list[float]]:
    """Empirical CDF of achieved skewness on an even grid over [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no skewness values")
    grid = np.linspace(0.0, 1.0, points)
    return [[float(x), float(np.mean(v <= x + 1e-12))] for x in grid]


def payload_stats(model: SplitModel, images: np.ndarray) -> dict:
    """Mean compressed size of the transmitted channels, and the ratio against 32-bit floats."""
    if model.centers is None:
        raise ValueError("model has no quantizer")
    q = Quantizer(model.centers.data)
    _, rest = split_features(model.client_features(images), model.k)
    sizes = np.array([len(compress_features(r, q)) for r in rest])
    raw_bits = 32.0 * rest[0].size
    return {
        "mean_payload_bytes": float(sizes.mean()),
        "compression_ratio": compression_ratio(raw_bits, 8.0 * float(sizes.mean())),
    }


def eval_metrics(model: SplitModel, ref: ReferenceNet, data: Dataset, ig_steps: int = 128) -> dict:
    ev = evaluate(model, ref, data, model.k, ig_steps)
    out = {
        "n": len(data),
        "accuracy": ev.accuracy,
        "mean_skewness": ev.mean_skewness,
        "disorder_rate": ev.disorder_rate,
        "ref_accuracy": ev.ref_accuracy,
        "skewness_cdf": skewness_cdf(ev.skewness),
        "mean_importance": ev.importance.mean(axis=0).tolist(),
    }
    out.update(payload_stats(model, data.images))
    return out


# ----------------------------------------------------------------------- aggregation


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _spec_key(doc):
    s = doc["config"]["spec"]
    return int(s["k"]), float(s["rho"])


def aggregate(docs: list[dict]) -> dict:
    """Group eval runs by (k, rho), offload runs by (mode, bandwidth), and list training runs."""
    if not docs:
        raise EmptyReportError("no reports to aggregate")
    quality = defaultdict(list)
    latency = defaultdict(list)
    training = []
    for doc in docs:
        if doc["kind"] == "eval":
            quality[_spec_key(doc)].append(doc["summary"])
        elif doc["kind"] == "offload":
            for run in doc["summary"]["runs"]:
                latency[(run["mode"], float(run["bandwidth_bps"]))].append(run)
        else:
            k, rho = _spec_key(doc)
            last = doc["records"][-1]
            training.append({"k": k, "rho": rho, "seed": doc["seed"], "epochs": last["epoch"],
                             **{c: last.get(c) for c in TRAINING_COLUMNS[4:]}})
    q_rows = []
    for (k, rho), runs in sorted(quality.items()):
        row = {"k": k, "rho": rho, "runs": len(runs)}
        for c in QUALITY_COLUMNS[3:]:
            row[c] = _mean(r.get(c) for r in runs)
        q_rows.append(row)
    l_rows = []
    for (mode, bw), runs in sorted(latency.items()):
        row = {"mode": mode, "bandwidth_bps": bw, "runs": len(runs), "n": sum(r["n"] for r in runs)}
        for c in LATENCY_COLUMNS[4:]:
            row[c] = _mean(r.get(c) for r in runs)
        l_rows.append(row)
    training.sort(key=lambda r: (r["k"], r["rho"], r["seed"]))
    cdfs = {f"k={k} rho={rho:g}": _mean_cdf([r["skewness_cdf"] for r in runs if "skewness_cdf" in r])
            for (k, rho), runs in sorted(quality.items())}
    return {
        "quality": q_rows,
        "latency": l_rows,
        "training": training,
        "skewness_cdf": {k: v for k, v in cdfs.items() if v},
        "sources": [{"kind": d["kind"], "seed": d["seed"], "config": d["config"]} for d in docs],
    }


def _mean_cdf(cdfs):
    if not cdfs:
        return None
    a = np.asarray(cdfs, dtype=np.float64)
    return a.mean(axis=0).tolist()


# ----------------------------------------------------------------------- rendering


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [columns] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(s.rjust(wd) for s, wd in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"


def _source_line(src: dict) -> str:
    line = f"{src['kind']:<8} seed={src['seed']}"
    spec = src["config"].get("spec")
    if spec:
        line += " " + " ".join(f"{key}={_fmt(spec[key])}" for key in ("k", "rho", "lam", "T") if key in spec)
    return line


def render_text(agg: dict) -> str:
    parts = ["# runs\n" + "".join(_source_line(s) + "\n" for s in agg["sources"])]
    for title, key, cols in (("quality", "quality", QUALITY_COLUMNS), ("latency", "latency", LATENCY_COLUMNS),
                             ("training", "training", TRAINING_COLUMNS)):
        if agg[key]:
            parts.append(f"# {title}\n" + format_table(agg[key], cols))
    return "\n".join(parts)


def render_figures(agg: dict, docs: list[dict], out_dir) -> list[Path]:
    """PNG figures next to the CSV files; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    meta = {"Software": None}

    if agg["skewness_cdf"]:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, cdf in agg["skewness_cdf"].items():
            xs, ys = zip(*cdf)
            ax.step(xs, ys, where="post", label=label)
        ax.set_xlabel("achieved skewness")
        ax.set_ylabel("fraction of samples")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, fontsize=8)
        written.append(_save(fig, out_dir / "skewness_cdf.png", meta))

    if agg["latency"]:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        by_mode = defaultdict(list)
        for r in agg["latency"]:
            by_mode[r["mode"]].append(r)
        for mode, rows in sorted(by_mode.items()):
            bw = [r["bandwidth_bps"] / 1e3 for r in rows]
            ax1.plot(bw, [1e3 * r["mean_t_total"] for r in rows], marker="o", label=mode)
        ax1.set_xscale("log")
        ax1.set_xlabel("bandwidth (kbps)")
        ax1.set_ylabel("mean latency (ms)")
        ax1.legend(frameon=False, fontsize=8)
        modes = sorted(by_mode)
        ax2.bar(modes, [_mean(r["mean_payload_bytes"] for r in by_mode[m]) for m in modes], color="0.5")
        ax2.set_ylabel("mean payload (bytes)")
        written.append(_save(fig, out_dir / "latency.png", meta))

    train_docs = [d for d in docs if d["kind"] == "train"]
    if train_docs:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        for d in train_docs:
            k, rho = _spec_key(d)
            label = f"k={k} rho={rho:g} seed={d['seed']}"
            recs = d["records"]
            ax1.plot([r["epoch"] for r in recs], [r["loss_total"] for r in recs], label=label)
            ev = [r for r in recs if "mean_skewness" in r]
            ax2.plot([r["epoch"] for r in ev], [r["mean_skewness"] for r in ev], marker=".", label=label)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("training loss")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("mean achieved skewness")
        ax2.legend(frameon=False, fontsize=8)
        written.append(_save(fig, out_dir / "training.png", meta))
    return written


def _save(fig, path: Path, meta) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=meta)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def write_report(docs: list[dict], out_dir, figures: bool = True) -> dict[str, Path]:
    """Aggregate ``docs`` and write summary.json, one CSV per non-empty table, report.txt and figures."""
    agg = aggregate(docs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"summary": write_json(out_dir / "summary.json", agg)}
    for key, cols in (("quality", QUALITY_COLUMNS), ("latency", LATENCY_COLUMNS), ("training", TRAINING_COLUMNS)):
        if agg[key]:
            p = out_dir / f"{key}.csv"
            p.write_text(to_csv(agg[key], cols))
            paths[key] = p
    p = out_dir / "report.txt"
    p.write_text(render_text(agg))
    paths["text"] = p
    if figures:
        for fp in render_figures(agg, docs, out_dir):
            paths[fp.stem] = fp
    return paths

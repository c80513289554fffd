"""Command-line interface: train, eval, offload, serve, report, demo.

Exit codes: 0 success, 2 config error, 3 data error, 4 training diverged,
5 transport failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import offload as off
from . import report as rep
from .config import ConfigError, ExperimentConfig, load_file, merge, resolve
from .data import ArchiveError, DataError, Dataset, load_csv, load_idx, load_model, save_model, train_test
from .skewtrain import DivergenceError, spec_dict, train_pipeline

log = logging.getLogger("xaisplit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_TRANSPORT = 5

SERVER_ENV = "XAISPLIT_SERVER"

# demo defaults: short enough for one CPU core in a few minutes
DEMO_OVERRIDES = {"train": {"epochs": 12, "eval_every": 4}}


class TransportFailure(RuntimeError):
    pass


# ----------------------------------------------------------------------- arguments

# flag dest -> (config section or None, config key)
_FLAG_KEYS = {
    "seed": (None, "seed"),
    "task": ("data", "task"),
    "n_train": ("data", "n_train"),
    "n_test": ("data", "n_test"),
    "train_images": ("data", "train_images"),
    "train_labels": ("data", "train_labels"),
    "test_images": ("data", "test_images"),
    "test_labels": ("data", "test_labels"),
    "channels": ("extractor", "channels_out"),
    "k": ("spec", "k"),
    "rho": ("spec", "rho"),
    "lam": ("spec", "lam"),
    "T": ("spec", "T"),
    "epochs": ("train", "epochs"),
    "warmup_epochs": ("train", "warmup_epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "weight_decay": ("train", "weight_decay"),
    "ig_steps": ("train", "ig_steps"),
    "levels": ("train", "levels"),
    "eval_every": ("train", "eval_every"),
    "bandwidth": ("link", "bandwidths_bps"),
    "rtt": ("link", "rtt_s"),
    "modes": (None, "modes"),
    "timeout": (None, "timeout_s"),
    "eval_ig_steps": (None, "eval_ig_steps"),
}


def _add_config_flags(p: argparse.ArgumentParser, train=False, data=False, link=False):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    if data:
        g = p.add_argument_group("data")
        g.add_argument("--task", help="synthetic task: radial, xor-grid or stripe")
        g.add_argument("--n-train", type=int)
        g.add_argument("--n-test", type=int)
        g.add_argument("--train-images", help=".idx or .csv file instead of a synthetic task")
        g.add_argument("--train-labels")
        g.add_argument("--test-images")
        g.add_argument("--test-labels")
        g.add_argument("--eval-ig-steps", type=int)
    if train:
        g = p.add_argument_group("model and training")
        g.add_argument("--channels", type=int, help="extractor output channels C")
        g.add_argument("--k", type=int, help="channels kept on the device")
        g.add_argument("--rho", type=float, help="skewness target")
        g.add_argument("--lambda", dest="lam", type=float, help="prediction-loss weight")
        g.add_argument("--T", type=float, help="combiner temperature")
        g.add_argument("--epochs", type=int)
        g.add_argument("--warmup-epochs", type=int)
        g.add_argument("--batch-size", type=int)
        g.add_argument("--lr", type=float)
        g.add_argument("--weight-decay", type=float)
        g.add_argument("--ig-steps", type=int)
        g.add_argument("--levels", type=int, help="quantizer levels")
        g.add_argument("--eval-every", type=int)
    if link:
        g = p.add_argument_group("offload")
        g.add_argument("--bandwidth", type=float, action="append", help="link bandwidth in bit/s (repeat for a sweep)")
        g.add_argument("--rtt", type=float, help="fixed round-trip time in seconds")
        g.add_argument("--mode", dest="modes", action="append", choices=off.MODES)
        g.add_argument("--timeout", type=float, help="reply timeout in seconds")
        g.add_argument("--server", help=f"host:port of a running server (default ${SERVER_ENV}, else in-process)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xaisplit", description="Importance-skewed split inference toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a split model and write its archive and log")
    _add_config_flags(p, train=True, data=True)
    p.add_argument("--out", default="runs/train", help="output directory")

    p = sub.add_parser("eval", help="accuracy, achieved skewness and payload size of an archive")
    _add_config_flags(p, data=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="runs/eval")

    p = sub.add_parser("offload", help="run the inference modes over a transport with a simulated link")
    _add_config_flags(p, data=True, link=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="runs/offload")
    p.add_argument("--limit", type=int, help="only the first N test samples")

    p = sub.add_parser("serve", help="serve remote-head requests over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5870)

    p = sub.add_parser("report", help="aggregate report JSON files into tables, CSV and figures")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", default="runs/report")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("demo", help="train, evaluate, offload and report on a synthetic task")
    _add_config_flags(p, train=True, data=True, link=True)
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    return ap


def config_from_args(args, extra: dict | None = None) -> ExperimentConfig:
    file_values = load_file(args.config) if getattr(args, "config", None) else {}
    overrides: dict = {}
    for dest, (section, key) in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        if section is None:
            overrides[key] = v
        else:
            overrides.setdefault(section, {})[key] = v
    base = extra or {}
    # precedence: command defaults < config file < flags
    return resolve(merge(base, file_values), overrides)


# ----------------------------------------------------------------------- data


def _load_file(images, labels, classes, split) -> Dataset:
    suffix = Path(images).suffix.lower()
    if suffix == ".csv":
        return load_csv(images, classes=classes, split=split)
    return load_idx(images, labels, classes=classes, split=split)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.train_images is not None:
        return (_load_file(d.train_images, d.train_labels, d.classes, "train"),
                _load_file(d.test_images, d.test_labels, d.classes, "test"))
    return train_test(d.task, d.n_train, d.n_test, cfg.data_seed, classes=d.classes, noise=d.noise,
                      size=cfg.extractor.input_shape[0])


def _check_shape(model, data: Dataset):
    want = tuple(model.extractor.cfg.input_shape)
    if tuple(data.images.shape[1:]) != want:
        raise DataError(f"dataset images are {data.images.shape[1:]}, model expects {want}")
    if data.classes != model.classes:
        raise DataError(f"dataset has {data.classes} classes, model predicts {model.classes}")


def _load_archive(path, need_reference=False):
    model, ref, manifest = load_model(path)
    if not model.trained:
        raise ArchiveError(f"{path} holds an untrained model")
    if need_reference and ref is None:
        raise ArchiveError(f"{path} has no reference net; it is needed for attribution")
    return model, ref, manifest


def _spec_of(manifest: dict, cfg: ExperimentConfig) -> dict:
    return manifest.get("spec", spec_dict(cfg.spec))


# ----------------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    train, test = load_data(cfg)

    def progress(r):
        msg = f"epoch {r['epoch']:3d}  train_acc {r['train_acc']:.3f}  loss {r['loss_total']:.4f}"
        if "mean_skewness" in r:
            msg += f"  test_acc {r['test_acc']:.3f}  skewness {r['mean_skewness']:.3f}  disorder {r['disorder_rate']:.3f}"
        log.info(msg)

    res = train_pipeline(train, test, cfg.extractor, cfg.spec, cfg.train, on_epoch=progress)
    out.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out / "model.xsa", res.ref,
               extra={"spec": spec_dict(cfg.spec), "selected": [int(c) for c in res.selected], "seed": cfg.seed})
    summary = {"selected_channels": [int(c) for c in res.selected], "likelihood": res.likelihood.tolist(),
               "ref_train_accuracy": res.ref_accuracy, "alpha": res.model.alpha, "final": res.log[-1]}
    doc = rep.make_report("train", cfg.to_dict(), cfg.seed, summary, res.log)
    rep.write_json(out / "train.json", doc)
    cols = sorted({c for r in res.log for c in r}, key=lambda c: (c != "epoch", c))
    (out / "train_log.csv").write_text(rep.to_csv(res.log, cols))
    return doc


def cmd_eval(cfg: ExperimentConfig, model_path, out: Path) -> dict:
    model, ref, manifest = _load_archive(model_path, need_reference=True)
    _, test = load_data(cfg)
    _check_shape(model, test)
    summary = rep.eval_metrics(model, ref, test, cfg.eval_ig_steps)
    conf = cfg.to_dict()
    conf["spec"] = _spec_of(manifest, cfg)
    doc = rep.make_report("eval", conf, cfg.seed, summary)
    rep.write_json(out / "eval.json", doc)
    log.info("accuracy %.4f  mean skewness %.4f  disorder rate %.4f  payload %.1f B",
             summary["accuracy"], summary["mean_skewness"], summary["disorder_rate"], summary["mean_payload_bytes"])
    return doc


def _parse_addr(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"server address must be host:port, got {s!r}")
    return host, int(port)


def cmd_offload(cfg: ExperimentConfig, model_path, out: Path, server: str | None = None, limit: int | None = None) -> dict:
    model, _, manifest = _load_archive(model_path)
    _, test = load_data(cfg)
    _check_shape(model, test)
    images, labels = test.images[:limit], test.labels[:limit]
    server = server or os.environ.get(SERVER_ENV)
    local_server = None
    if server:
        transport = off.TcpTransport(*_parse_addr(server))
        transport_name = "tcp"
    else:
        local_server = off.OffloadServer(off.ServerCore(model)).start()
        transport = off.TcpTransport(*local_server.address)
        transport_name = "loopback-tcp"
    runs, records = [], []
    try:
        for mode in cfg.modes:
            # compute and payloads do not depend on the link, so run once and re-time per bandwidth
            z, reports = off.run_modes(model, images, mode, cfg.link.models()[0],
                                       None if mode == "local_only" else transport, cfg.cost, cfg.timeout_s)
            preds = z.argmax(axis=1)
            for link in cfg.link.models():
                retimed = [_retime(r, link) for r in reports]
                s = off.summarize(retimed, preds, labels)
                s["bandwidth_bps"] = link.bandwidth_bps
                s["rtt_s"] = link.fixed_rtt_s
                runs.append(s)
                records.extend(dict(r.to_dict(), bandwidth_bps=link.bandwidth_bps) for r in retimed)
    finally:
        transport.close()
        if local_server is not None:
            local_server.stop()
    conf = cfg.to_dict()
    conf["spec"] = _spec_of(manifest, cfg)
    conf["transport"] = transport_name
    doc = rep.make_report("offload", conf, cfg.seed, {"runs": runs}, records)
    rep.write_json(out / "offload.json", doc)
    for s in runs:
        log.info("%-12s %9.0f bps  mean %.3f ms  p95 %.3f ms  payload %.1f B  acc %.4f  fallback %.2f",
                 s["mode"], s["bandwidth_bps"], 1e3 * s["mean_t_total"], 1e3 * s["p95_t_total"],
                 s["mean_payload_bytes"], s["accuracy"], s["fallback_rate"])
    remote = [s for s in runs if s["mode"] != "local_only"]
    if remote and all(s["fallback_rate"] == 1.0 for s in remote):
        raise TransportFailure(f"no reply from the server for any sample ({transport_name})")
    return doc


def _retime(r: off.LatencyReport, link: off.LinkModel) -> off.LatencyReport:
    if r.fallback or r.payload_bytes == 0:
        return r
    return off.LatencyReport(**{**r.__dict__, "t_tx": off.simulate_link(r.payload_bytes, link)})


def cmd_serve(model_path, host: str, port: int) -> None:
    model, _, _ = _load_archive(model_path)
    try:
        off.server_loop(off.ServerCore(model), host, port)
    except OSError as e:
        raise TransportFailure(f"cannot serve on {host}:{port}: {e}") from e


def cmd_report(paths, out: Path, figures: bool = True) -> dict:
    if not paths:
        raise rep.EmptyReportError("no report files given")
    docs = [rep.read_report(p) for p in paths]
    written = rep.write_report(docs, out, figures)
    sys.stdout.write((out / "report.txt").read_text())
    return written


def cmd_demo(cfg: ExperimentConfig, out: Path, limit=None, figures: bool = True) -> dict:
    t0 = time.perf_counter()
    cmd_train(cfg, out)
    cmd_eval(cfg, out / "model.xsa", out)
    cmd_offload(cfg, out / "model.xsa", out, limit=limit)
    written = cmd_report([out / "train.json", out / "eval.json", out / "offload.json"], out / "report", figures)
    log.info("demo finished in %.1f s", time.perf_counter() - t0)
    return written


# ----------------------------------------------------------------------- entry point


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "train":
            cmd_train(config_from_args(args), Path(args.out))
        elif args.command == "eval":
            cmd_eval(config_from_args(args), args.model, Path(args.out))
        elif args.command == "offload":
            cmd_offload(config_from_args(args), args.model, Path(args.out), args.server, args.limit)
        elif args.command == "serve":
            cmd_serve(args.model, args.host, args.port)
        elif args.command == "report":
            cmd_report(args.reports, Path(args.out), not args.no_figures)
        elif args.command == "demo":
            cmd_demo(config_from_args(args, DEMO_OVERRIDES), Path(args.out), args.limit, not args.no_figures)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGENCE
    except (TransportFailure, off.TransportError) as e:
        log.error("transport failure: %s", e)
        return EXIT_TRANSPORT
    except (DataError, ArchiveError, rep.ReportError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

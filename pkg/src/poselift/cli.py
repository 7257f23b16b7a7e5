"""Command-line entry point: generate, train, eval, ablate, analyze.

Every run writes one JSON manifest holding the fully resolved config, so a run
can be replayed by passing that manifest back through ``--config``.
Exit codes: 0 success, 2 usage/validation, 1 runtime failure; failures print a
single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import analysis, benchmark
from . import model as modelmod
from .geometry import evaluate
from .model import ModelConfig
from .synthdata import SynthConfig, make_dataset, read_dataset
from .trainpipe import MODES, TrainConfig, train

log = logging.getLogger("poselift")


class UsageError(ValueError):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(path, subcommand: str, config: dict, seed, artifacts: dict, started: str):
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "version": tool_version(),
        "started": started,
        "finished": _now(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return doc


def load_config_file(path) -> dict:
    """A config file is either a plain section dict or a previous run manifest."""
    if not path:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    return doc.get("config", doc) if isinstance(doc, dict) else {}


def _merge(defaults: dict, *layers) -> dict:
    out = dict(defaults)
    for layer in layers:
        out.update({k: v for k, v in (layer or {}).items() if v is not None})
    return out


def _build(cls, d: dict):
    try:
        return cls.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    started = _now()
    if args.count is not None and args.count < 1:
        raise UsageError("--count must be at least 1")
    conf = load_config_file(args.config)
    synth = _build(SynthConfig, _merge(SynthConfig().to_dict(), conf.get("synth")))
    data_conf = _merge({"count": 1000, "seed": 0, "heldout": None}, conf.get("data"),
                       {"count": args.count, "seed": args.seed, "heldout": args.heldout})
    if data_conf["count"] < 1:
        raise UsageError("count must be at least 1")
    ds = make_dataset(data_conf["count"], synth, data_conf["seed"], args.out, data_conf["heldout"])
    log.info("wrote %s header=%s train=%d", args.out, ds.header, ds.train_count)
    write_manifest(args.out + ".manifest.json", "generate", {"synth": synth.to_dict(), "data": data_conf},
                   data_conf["seed"], {"dataset": args.out}, started)
    print(json.dumps({"dataset": args.out, "header": list(ds.header)}))
    return 0


def resolve_train(args) -> tuple[ModelConfig, TrainConfig]:
    conf = load_config_file(args.config)
    base_m = benchmark.model_config().to_dict() if args.toy else ModelConfig().to_dict()
    base_t = benchmark.train_config().to_dict() if args.toy else TrainConfig().to_dict()
    flags_m = {"r": args.r, "d": args.d, "heads": args.heads, "seed": args.seed,
               "stage1": args.stage1.split(",") if args.stage1 else None}
    flags_t = {"mode": args.mode, "stage1_epochs": args.epochs1, "stage2_epochs": args.epochs2,
               "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed, "loss_form": args.loss}
    mcfg = _build(ModelConfig, _merge(base_m, conf.get("model"), flags_m))
    tcfg = _build(TrainConfig, _merge(base_t, conf.get("train"), flags_t))
    return mcfg, tcfg


def cmd_train(args) -> int:
    started = _now()
    mcfg, tcfg = resolve_train(args)
    data = read_dataset(args.data)
    if (data.H, data.W, data.d, data.h, data.w) != (mcfg.H, mcfg.W, mcfg.feat_dim, mcfg.image_h, mcfg.image_w):
        raise UsageError(f"dataset geometry {data.header} does not match model config")
    out = _outdir(args.out)
    res = train(data, tcfg, mcfg)
    ckpt = os.path.join(out, "model.ckpt")
    tlog = os.path.join(out, "trainlog.jsonl")
    modelmod.save(res.model, ckpt, epoch=res.epoch,
                  extra={"train": tcfg.to_dict(), "phase_a_digest": res.phase_a_digest})
    res.log.write(tlog)
    write_manifest(os.path.join(out, "manifest.json"), "train",
                   {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": {"path": args.data}},
                   tcfg.seed, {"checkpoint": ckpt, "trainlog": tlog}, started)
    last = res.log.records[-1] if res.log.records else None
    print(json.dumps({"checkpoint": ckpt, "epochs": res.epoch,
                      "final_mpjpe_heldout": last.mpjpe_heldout if last else None}))
    return 0


def _split(data, name):
    return data if name == "all" else data.split(name)


def cmd_eval(args) -> int:
    started = _now()
    if args.pck_threshold <= 0:
        raise UsageError("--pck-threshold must be positive")
    model, _ = modelmod.load(args.ckpt)
    data = _split(read_dataset(args.data), args.split)
    if data.count == 0:
        raise UsageError(f"split {args.split!r} is empty")
    pred = model.predict(data.pose2d, data.feats, refined=args.head == "refined")
    rep = evaluate(pred, data.pose3d.astype(np.float64), pck_threshold=args.pck_threshold,
                   with_procrustes=args.protocol == 2 or args.all_metrics)
    stem = args.out or os.path.splitext(args.ckpt)[0] + f".eval-{args.split}"
    rep.write(stem)
    headline = rep.mpjpe if args.protocol == 1 else rep.p_mpjpe
    write_manifest(stem + ".manifest.json", "eval",
                   {"ckpt": args.ckpt, "data": args.data, "split": args.split, "protocol": args.protocol,
                    "pck_threshold": args.pck_threshold, "head": args.head}, None,
                   {"report_txt": stem + ".txt", "report_json": stem + ".json"}, started)
    print(json.dumps({"protocol": args.protocol, "error_mm": headline, "mpjpe": rep.mpjpe,
                      "p_mpjpe": rep.p_mpjpe, "pck": rep.pck, "auc": rep.auc}))
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    data = read_dataset(args.data)
    train_kw = {"stage1_epochs": args.epochs1, "stage2_epochs": args.epochs2}
    train_kw = {k: v for k, v in train_kw.items() if v is not None}
    try:
        benchmark.sweep(args.axis)
    except ValueError as e:
        raise UsageError(str(e)) from e
    rows = benchmark.ablate(data, args.axis, args.seed, train_kw)
    with open(args.out, "w") as f:
        f.write(benchmark.format_table(rows))
    write_manifest(args.out + ".manifest.json", "ablate",
                   {"axis": args.axis, "sweep": benchmark.sweep(args.axis), "train": train_kw, "data": args.data},
                   args.seed, {"table": args.out}, started)
    print(json.dumps({"table": args.out, "rows": len(rows)}))
    return 0


def cmd_analyze(args) -> int:
    started = _now()
    if args.radius <= 0:
        raise UsageError("--radius must be positive")
    model, _ = modelmod.load(args.ckpt)
    data = _split(read_dataset(args.data), args.split)
    if data.count == 0:
        raise UsageError(f"split {args.split!r} is empty")
    out = _outdir(args.out)
    bg = analysis.dataset_background(model, data, args.radius)
    mat = analysis.dataset_structure(model, data, args.radius)
    np.savetxt(os.path.join(out, "structure.txt"), mat, fmt="%.9g")
    exports = {}
    for i in range(min(args.exports, data.count)):
        path = os.path.join(out, f"attention_{i:03d}.txt")
        png = os.path.join(out, f"attention_{i:03d}.png") if args.png else None
        res = analysis.export_attention(model, data.pose2d[i:i + 1], data.feats[i:i + 1], path, png)
        exports[f"attention_{i:03d}"] = path
        exports[f"retained_{i:03d}"] = int(res["mask"].sum())
    summary = {"background": bg, "radius": args.radius, "split": args.split, "count": data.count,
               "structure_shape": list(mat.shape), "retained": model.cfg.r}
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    write_manifest(os.path.join(out, "manifest.json"), "analyze",
                   {"ckpt": args.ckpt, "data": args.data, "split": args.split, "radius": args.radius,
                    "exports": args.exports}, None,
                   {"summary": os.path.join(out, "summary.json"),
                    "structure": os.path.join(out, "structure.txt"),
                    **{k: v for k, v in exports.items() if isinstance(v, str)}}, started)
    print(json.dumps({**summary, "exports": exports}))
    return 0


# ---------------------------------------------------------------- parser


def _retention(text: str) -> float:
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (0.0 < r <= 1.0):
        raise argparse.ArgumentTypeError(f"retention rate must lie in (0, 1], got {r}")
    return r


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(json.dumps({"error": "usage", "type": "ArgumentError", "message": message}) + "\n")
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poselift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--heldout", type=int, help="held-out-scene samples (default: 1/6 of count)")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a lifting model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--r", type=_retention)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--loss", choices=("sum-l2", "mean-squared"))
    t.add_argument("--d", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--stage1", help="comma-separated layer specs, e.g. TL,PGTL,TL")
    t.add_argument("--toy", action="store_true", help="start from the benchmark's toy sizes")
    t.add_argument("--config")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", type=int, choices=(1, 2), default=1)
    e.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    e.add_argument("--head", choices=("refined", "coarse"), default="refined")
    e.add_argument("--pck-threshold", type=float, default=150.0)
    e.add_argument("--all-metrics", action="store_true", help="also compute P-MPJPE under protocol 1")
    e.add_argument("--out", help="report stem (writes .txt and .json)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one ablation axis")
    a.add_argument("--axis", required=True, choices=("r", "layers", "variant"))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs1", type=int)
    a.add_argument("--epochs2", type=int)
    a.set_defaults(fn=cmd_ablate)

    z = sub.add_parser("analyze", help="attention forensics for a checkpoint")
    z.add_argument("--ckpt", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    z.add_argument("--radius", type=float, default=30.0)
    z.add_argument("--exports", type=int, default=3)
    z.add_argument("--png", action="store_true")
    z.set_defaults(fn=cmd_analyze)
    return p


def _fail(kind: str, err: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(err).__name__, "message": str(err)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # argparse exits with 2 on malformed flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        return _fail("usage", e, 2)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        return _fail("runtime", e, 1)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``rtlmark <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print a single ``error: <category>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import certify, experiments, heatmap, synthdata
from .diffcore import DegenerateInputError, no_grad
from .diffcore.tensorio import TensorFormatError
from .metrics import DEFAULT_THRESHOLDS, evaluate, write_report
from .model import (ConfigError, ModelConfig, forward, load_checkpoint, save_checkpoint,
                    student_from_teacher)
from .optim import NumericError
from .regularizers import RegularizerSpec, spatial_attention
from .trainer import TrainConfig, predict, train

log = logging.getLogger("rtlmark")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LAMBDA_GRID = [0.0, 2e-5, 2e-4, 2e-3, 2e-2]
SIGMA_GRID = [1.0, 1.5, 2.0, 2.5, 3.0]

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"spec", "seed"}

DEFAULTS = {
    "seed": 0,
    "model": {k: v for k, v in experiments.DESK_MODEL.to_dict().items() if k != "seed"},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k in _TRAIN_KEYS},
    "reg": RegularizerSpec().to_dict(),
    "data": {"path": None, "n": 600, "image_size": 64, "C": 8, "variant": "faces"},
    "teacher": {"path": None, "epochs": 10, "batch_size": 16, "lr0": 1e-3},
    "student": {"path": None},
    "eval": {"split": "test", "predictions": None, "thresholds": list(DEFAULT_THRESHOLDS),
             "per_landmark_failure": False},
    "attention": {"images": [0, 1, 2, 3], "upscale": 8},
    "gradcheck": {"n_params": 250},
    "sweep": {"param": "lambda", "values": None, "n_seeds": 5, "method": "RTL-SAM"},
}


class CliConfigError(Exception):
    pass


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise CliConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict) and not (where == "reg." and k == "lambda"):
            if not isinstance(v, dict):
                raise CliConfigError(f"{where}{k} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path=None, sets=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliConfigError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise CliConfigError(f"config file {path}: {e}")
        if not isinstance(user, dict):
            raise CliConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliConfigError(f"--set expects key=value, got {item!r}")
        nested: dict = {}
        node = nested
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
        cfg = _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise CliConfigError("seed must be a non-negative integer")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def provenance(cfg: dict, command: str) -> dict:
    return {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}


def _echo(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg, "provenance": provenance(cfg, command)}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def model_config(cfg: dict, **over) -> ModelConfig:
    d = dict(cfg["model"])
    d.update(over)
    d["seed"] = cfg["seed"]
    return ModelConfig.from_dict(d)


def train_config(cfg: dict, **over) -> TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = cfg["seed"]
    d["spec"] = RegularizerSpec.from_dict(cfg["reg"])
    d.update(over)
    return TrainConfig.from_dict(d)


def _need(cfg: dict, section: str, key: str = "path") -> Path:
    value = cfg[section][key]
    if value is None:
        raise CliConfigError(f"{section}.{key} is required for this command")
    return Path(value)


def _dataset(cfg: dict):
    return synthdata.load_dataset(_need(cfg, "data"))


def _student_config(cfg: dict, teacher, dataset) -> ModelConfig:
    d = teacher.config.to_dict()
    for k in ("K", "deconv_channels", "skip_connections", "attention_source", "precision"):
        d[k] = cfg["model"][k]
    d["K"] = int(dataset.manifest["K"])
    d["seed"] = cfg["seed"]
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict, out: Path) -> None:
    d = cfg["data"]
    synthdata.generate(d["n"], d["image_size"], d["C"], cfg["seed"], out_dir=out, variant=d["variant"])
    _echo(cfg, out, "synth")
    log.info("wrote %d samples to %s", d["n"], out)


def cmd_pretrain(cfg: dict, out: Path) -> None:
    ds = _dataset(cfg)
    t = cfg["teacher"]
    mc = model_config(cfg, H=ds.size, W=ds.size, C=int(ds.manifest["C"]))
    teacher, acc = synthdata.pretrain_teacher(ds, mc, epochs=t["epochs"], seed=cfg["seed"],
                                              batch_size=t["batch_size"], lr0=t["lr0"], log=log.info)
    _echo(cfg, out, "pretrain")
    save_checkpoint(teacher, out / "teacher.ckpt",
                    extra={"train_accuracy": acc, "source": ds.manifest["variant"],
                           "provenance": provenance(cfg, "pretrain")})
    print(f"teacher train accuracy {acc:.4f}")


def _train_student(cfg: dict, teacher, ds, tc: TrainConfig):
    student = student_from_teacher(teacher, _student_config(cfg, teacher, ds), seed=tc.seed)
    return train(student, teacher, ds, tc, log=log.info)


def cmd_train(cfg: dict, out: Path) -> None:
    ds = _dataset(cfg)
    teacher = load_checkpoint(_need(cfg, "teacher"))
    if not teacher.is_teacher:
        raise CliConfigError("teacher.path does not hold a frozen teacher checkpoint")
    student, hist = _train_student(cfg, teacher, ds, train_config(cfg))
    _echo(cfg, out, "train")
    hist.write_csv(out / "history.csv")
    save_checkpoint(student, out / "student.ckpt",
                    extra={"best_epoch": hist.best_epoch, "provenance": provenance(cfg, "train")})
    print(f"best epoch {hist.best_epoch} val loss {hist.val_losses[hist.best_epoch]:.6f}")


def _read_predictions(directory: Path, indices) -> np.ndarray:
    try:
        return np.stack([heatmap.read_landmarks_csv(directory / f"{i:04d}.csv") for i in indices])
    except FileNotFoundError as e:
        raise synthdata.DataError(f"missing prediction file {e.filename}")


def cmd_eval(cfg: dict, out: Path) -> None:
    ds = _dataset(cfg)
    e = cfg["eval"]
    idx = ds.split(e["split"])
    if e["predictions"] is not None:
        preds = _read_predictions(Path(e["predictions"]), idx)
    else:
        student = load_checkpoint(_need(cfg, "student"))
        preds = predict(student, ds.normalized(idx))
    report = evaluate(preds, ds.landmarks[idx], e["thresholds"], e["per_landmark_failure"])
    _echo(cfg, out, "eval")
    write_report(report, out / "report.json", out / "ced.csv", extra={"provenance": provenance(cfg, "eval")})
    print(report.summary())


def write_pgm(path: Path, a: np.ndarray) -> None:
    """ASCII P2 image, values min-max scaled to 0..255 (a constant map becomes 0)."""
    lo, hi = float(a.min()), float(a.max())
    v = np.zeros(a.shape, dtype=np.int64) if hi == lo else np.rint((a - lo) / (hi - lo) * 255).astype(np.int64)
    rows = [" ".join(str(x) for x in r) for r in v]
    path.write_text(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n" + "\n".join(rows) + "\n")


def cmd_attention(cfg: dict, out: Path) -> None:
    ds = _dataset(cfg)
    teacher = load_checkpoint(_need(cfg, "teacher"))
    student = load_checkpoint(_need(cfg, "student"))
    idx = cfg["attention"]["images"]
    up = int(cfg["attention"]["upscale"])
    if up < 1 or any(not 0 <= i < len(ds.images) for i in idx):
        raise CliConfigError("attention.images must index the dataset and upscale must be >= 1")
    x = ds.normalized(idx)
    with no_grad():
        maps = {}
        for role, m in (("teacher", teacher), ("student", student)):
            a = spatial_attention(forward(m, x.astype(m.config.dtype), need={"activation"}).activation).data
            a = a.astype(np.float64)
            # unit L2 norm per image, the scale the SAM constraint compares at
            maps[role] = a / np.sqrt((a ** 2).sum(axis=(1, 2), keepdims=True))
    maps["diff"] = np.abs(maps["teacher"] - maps["student"])
    out.mkdir(parents=True, exist_ok=True)
    for j, i in enumerate(idx):
        for role in ("teacher", "student", "diff"):
            a = np.kron(maps[role][j], np.ones((up, up)))
            write_pgm(out / f"{i:04d}_{role}.pgm", a)
    _echo(cfg, out, "attention")


def cmd_gradcheck(cfg: dict, out) -> None:
    r = certify.run_suite(seed=cfg["seed"], n_params=cfg["gradcheck"]["n_params"])
    for name, err in r["ops"].items():
        print(f"{name:24s} {err:.3e}")
    print(f"{'full_loss':24s} {r['full_loss']:.3e} ({r['full_loss_entries']} entries, "
          f"{r['full_loss_kink_skips']} kink skips)")
    print(f"max {r['max_error']:.3e} tolerance {r['tolerance']:.0e} in {r['seconds']:.1f}s")
    if out is not None:
        _echo(cfg, out, "gradcheck")
        stable = {k: v for k, v in r.items() if k != "seconds"}
        (out / "gradcheck.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    if not r["passed"]:
        raise NumericError(f"gradient check failed: max relative error {r['max_error']:.3e}")


def cmd_sweep(cfg: dict, out: Path) -> None:
    s = cfg["sweep"]
    param = s["param"]
    if param not in ("lambda", "sigma"):
        raise CliConfigError("sweep.param must be 'lambda' or 'sigma'")
    if s["method"] not in experiments.METHODS:
        raise CliConfigError(f"sweep.method must be one of {sorted(experiments.METHODS)}")
    values = s["values"] or (LAMBDA_GRID if param == "lambda" else SIGMA_GRID)
    ds = _dataset(cfg)
    teacher = load_checkpoint(_need(cfg, "teacher"))
    freeze, active = experiments.METHODS[s["method"]]
    seeds = [cfg["seed"] + k for k in range(s["n_seeds"])]
    runs = ["value,seed,mse,auc_1.0,fr_1.0"]
    summary = ["param,value,n_seeds,mse_mean,mse_std,auc_1.0_mean,fr_1.0_mean"]
    test = ds.split("test")
    for v in values:
        errs, aucs, frs = [], [], []
        for sd in seeds:
            reg = dict(cfg["reg"], active=list(active))
            if param == "lambda":
                reg["lambda"] = v
            c = dict(cfg, seed=sd, reg=reg)
            tc = train_config(c, freeze=freeze, **({"sigma": v} if param == "sigma" else {}))
            student, _ = _train_student(c, teacher, ds, tc)
            rep = evaluate(predict(student, ds.normalized(test)), ds.landmarks[test])
            errs.append(rep.mse_mean)
            aucs.append(rep.auc[1.0])
            frs.append(rep.failure_rate[1.0])
            runs.append(f"{v!r},{sd},{rep.mse_mean!r},{rep.auc[1.0]!r},{rep.failure_rate[1.0]!r}")
            log.info("%s=%s seed %d: %.4f", param, v, sd, rep.mse_mean)
        summary.append(f"{param},{v!r},{len(seeds)},{np.mean(errs)!r},{np.std(errs)!r},"
                       f"{np.mean(aucs)!r},{np.mean(frs)!r}")
        print(f"{param}={v}: MSE {np.mean(errs):.4f} ± {np.std(errs):.4f}")
    _echo(cfg, out, "sweep")
    (out / "sweep_runs.csv").write_text("\n".join(runs) + "\n")
    (out / "sweep.csv").write_text("\n".join(summary) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtlmark", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set reg.lambda=0.002 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def _category(exc: BaseException) -> tuple:
    if isinstance(exc, (NumericError, synthdata.DegenerateTeacherError, DegenerateInputError, FloatingPointError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, (synthdata.DataError, FileNotFoundError, TensorFormatError, OSError)):
        return "data", EXIT_DATA
    if isinstance(exc, (CliConfigError, ConfigError, ValueError, KeyError, TypeError)):
        return "config", EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out) if args.out else None
        if out is None and args.command != "gradcheck":
            raise CliConfigError(f"{args.command} needs --out")
        COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        name, code = _category(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {name}: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen, train, eval, matrix, verify.

Config files are INI-style ``key = value`` text. Keys may sit in the
sections ``[bags]``, ``[train]``, ``[matrix]``, ``[eval]`` or, for a flat
file, before any section header. ``[run]`` is written into manifests and
ignored on read, so a manifest is itself a valid config.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bagdata import (
    BagSpec,
    IdxFormatError,
    build_bags,
    default_samples_per_class,
    load_dataset,
    load_idx,
    make_synthetic_pool,
    save_dataset,
)
from .evalbench import evaluate, rows_to_csv, run_matrix
from .gradstrat import EpochRecord, Strategy, TrainConfig, train
from .model import load_params, save_params
from .seeding import substream

log = logging.getLogger("abmil_acc")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


POOL_KEYS = {"input_dim": 16, "n_classes": 10, "samples_per_class": 0, "source": "synthetic",
             "idx_images": "", "idx_labels": "", "idx_limit": 0}
MATRIX_KEYS = {"strategies": "accumulate", "alphas": "25,50,100", "inference_samples": "100",
               "repeats": 3}
EVAL_KEYS = {"inference_sample_percent": 100.0, "split": "test"}
SECTIONS = {
    "bags": {**{k: f.default for k, f in _fields(BagSpec).items()}, **POOL_KEYS},
    "train": {k: f.default for k, f in _fields(TrainConfig).items()},
    "matrix": MATRIX_KEYS,
    "eval": EVAL_KEYS,
}
CHOICES = {"strategy": [s.value for s in Strategy], "source": ["synthetic", "idx"],
           "split": ["train", "val", "test"]}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if key in CHOICES and raw not in CHOICES[key]:
        raise ConfigError(f"{key}: {raw!r} is not one of {', '.join(CHOICES[key])}")
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes", "on")
        if isinstance(default, Strategy):
            return Strategy(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config(path: str | None) -> dict[str, dict]:
    """Parse a config file into ``{section: {key: typed value}}`` with defaults."""
    values = {name: dict(defaults) for name, defaults in SECTIONS.items()}
    if path is None:
        return values
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string("[__flat__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section == "run":
            continue
        if section != "__flat__" and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; valid sections: "
                              f"{', '.join(SECTIONS)}, run")
        for key, raw in parser.items(section):
            targets = [section] if section != "__flat__" else [s for s in SECTIONS if key in SECTIONS[s]]
            if not targets or key not in SECTIONS[targets[0]]:
                valid = sorted(SECTIONS[section]) if section in SECTIONS else sorted(
                    {k for d in SECTIONS.values() for k in d})
                raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid)}")
            for t in targets:
                values[t][key] = _coerce(key, raw, SECTIONS[t][key])
    return values


def bag_spec_from(cfg: dict, seed: int | None) -> BagSpec:
    kw = {k: v for k, v in cfg["bags"].items() if k in _fields(BagSpec)}
    if seed is not None:
        kw["seed"] = seed
    try:
        return BagSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config_from(cfg: dict, seed: int | None) -> TrainConfig:
    kw = dict(cfg["train"])
    if seed is not None:
        kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _float_list(key: str, raw: str) -> list[float]:
    try:
        out = [float(x) for x in str(raw).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as a comma-separated number list") from None
    if not out:
        raise ConfigError(f"{key}: list must not be empty")
    if any(not 0 < x <= 100 for x in out):
        raise ConfigError(f"{key}: percentages must be in (0, 100], got {out}")
    return out


def write_manifest(out_dir: Path, command: str, cfg: dict, outputs: dict[str, str]) -> Path:
    """INI manifest echoing the resolved config; usable as ``--config`` for reruns."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"command": command, "version": __version__,
                     "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                     **{f"output.{k}": v for k, v in outputs.items()}}
    for section, values in cfg.items():
        parser[section] = {k: _render(v) for k, v in values.items()}
    path = out_dir / "manifest.txt"
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def _render(v) -> str:
    if isinstance(v, Strategy):
        return v.value
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


def _load_pool(bags_cfg: dict, seed: int):
    if bags_cfg["source"] == "idx":
        if not bags_cfg["idx_images"] or not bags_cfg["idx_labels"]:
            raise ConfigError("source = idx needs idx_images and idx_labels")
        limit = bags_cfg["idx_limit"] or None
        return load_idx(bags_cfg["idx_images"], bags_cfg["idx_labels"], limit)
    spc = bags_cfg["samples_per_class"] or default_samples_per_class(
        bag_spec_from({"bags": bags_cfg}, seed), bags_cfg["n_classes"])
    return make_synthetic_pool(seed, bags_cfg["n_classes"], bags_cfg["input_dim"], spc)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = read_config(args.config)
    spec = bag_spec_from(cfg, args.seed)
    cfg["bags"]["seed"] = spec.seed
    out = Path(args.out)
    pool = _load_pool(cfg["bags"], spec.seed)
    dataset = build_bags(pool, spec)
    save_dataset(dataset, out)
    write_manifest(out, "gen", {"bags": cfg["bags"]}, {"dataset": str(out)})
    print(f"wrote {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} bags to {out}")
    return EXIT_OK


def _require_dataset(path):
    if path is None:
        raise ConfigError("--dataset is required")
    return load_dataset(path)


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    tc = train_config_from(cfg, args.seed)
    dataset = _require_dataset(args.dataset)
    if args.config and _config_sets(args.config, "input_dim") and cfg["bags"]["input_dim"] != dataset.input_dim:
        raise ConfigError(f"config input_dim {cfg['bags']['input_dim']} does not match dataset "
                          f"input dimension {dataset.input_dim}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(dataset, tc, log=log.info)
    save_params(result.best_params, out / "best.bin")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EpochRecord.CSV_FIELDS)
        for rec in result.history:
            writer.writerow(rec.row())
    cfg["train"] = tc.as_dict()
    write_manifest(out, "train", {"train": cfg["train"]},
                   {"checkpoint": str(out / "best.bin"), "history": str(out / "history.csv"),
                    "dataset": str(args.dataset), "best_epoch": str(result.best_epoch)})
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'best.bin'}")
    return EXIT_OK


def _config_sets(path, key: str) -> bool:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.read_string("[__flat__]\n" + Path(path).read_text())
    return any(parser.has_option(s, key) for s in parser.sections() if s != "run")


def cmd_eval(args) -> int:
    cfg = read_config(args.config)
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    dataset = _require_dataset(args.dataset)
    params = load_params(args.checkpoint)
    ev_cfg = cfg["eval"]
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    bags = dataset.split(ev_cfg["split"])
    res = evaluate(params, bags, ev_cfg["inference_sample_percent"], substream(seed, "eval"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag", "bag_label", "score", "n_instances", "n_key", "max_attention_is_key"])
        for i, r in enumerate(res.records):
            top = int(np.argmax(r.attention_weights))
            writer.writerow([i, r.bag_label, repr(r.score), len(r.instance_labels),
                             int(r.instance_labels.sum()), int(r.instance_labels[top])])
    fmt = lambda v: "absent" if v is None else f"{v:.4f}"  # noqa: E731
    summary = (f"bag_accuracy = {res.bag_accuracy:.4f}\ninstance_auc = {fmt(res.instance_auc)}\n"
               f"instance_auc_bag_avg = {fmt(res.instance_auc_bag_avg)}\n")
    (out / "summary.txt").write_text(summary)
    write_manifest(out, "eval", {"eval": ev_cfg}, {"eval": str(out / "eval.csv"),
                                                   "checkpoint": str(args.checkpoint)})
    print(summary, end="")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = read_config(args.config)
    m = cfg["matrix"]
    alphas = _float_list("alphas", m["alphas"])
    samples = _float_list("inference_samples", m["inference_samples"])
    strategies = [s.strip() for s in str(m["strategies"]).split(",") if s.strip()]
    if not strategies:
        raise ConfigError("strategies: list must not be empty")
    for s in strategies:
        if s not in CHOICES["strategy"]:
            raise ConfigError(f"strategies: {s!r} is not one of {', '.join(CHOICES['strategy'])}")
    if m["repeats"] < 1:
        raise ConfigError("repeats must be >= 1")
    spec = bag_spec_from(cfg, args.seed)
    tc = train_config_from(cfg, args.seed)
    if cfg["bags"]["source"] == "idx":
        pool = _load_pool(cfg["bags"], spec.seed)
        factory = lambda s: build_bags(pool, s)  # noqa: E731
    else:
        factory = lambda s: build_bags(_load_pool(cfg["bags"], s.seed), s)  # noqa: E731
    rows = run_matrix(spec, strategies, alphas, samples, m["repeats"], tc, cfg["bags"]["input_dim"],
                      dataset_factory=factory)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.csv").write_text(rows_to_csv(rows))
    write_manifest(out, "matrix", cfg, {"matrix": str(out / "matrix.csv")})
    n_agg = sum(r["kind"] == "aggregate" for r in rows)
    print(f"wrote {len(rows) - n_agg} raw and {n_agg} aggregate rows to {out / 'matrix.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.scale)
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text("\n".join(c.line() for c in checks) + "\n")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abmil-acc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        if "config" in flags:
            p.add_argument("--config", help="key = value config file")
        if "out" in flags:
            p.add_argument("--out", required=name != "verify", help="output directory")
        if "dataset" in flags:
            p.add_argument("--dataset", help="dataset directory written by 'gen'")
        if "seed" in flags:
            p.add_argument("--seed", type=int, help="overrides the config seed")
        return p

    add("gen", cmd_gen, "generate a bag dataset", "config", "out", "seed")
    add("train", cmd_train, "train a model", "config", "out", "dataset", "seed")
    p = add("eval", cmd_eval, "evaluate a checkpoint", "config", "out", "dataset", "seed")
    p.add_argument("--checkpoint", help="checkpoint written by 'train'")
    add("matrix", cmd_matrix, "run the strategy x alpha x sampling grid", "config", "out", "seed")
    p = add("verify", cmd_verify, "run the equivalence and scaling checks", "out")
    p.add_argument("--scale", choices=["smoke", "full"], default="smoke")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IdxFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

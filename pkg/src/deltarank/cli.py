"""Command-line entry point: train, optimize, eval, inspect, report.

Exit codes: 0 success, 3 success with the accuracy constraint not met,
1 usage or configuration error, 2 runtime fault. Logs go to stderr, results
to stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint
from .config import AnnealSchedule, OptimizationConfig
from .data import (
    AugmentConfig,
    DataError,
    Dataset,
    load_idx,
    normalize_dataset,
    synth_shapes,
    znorm_stats,
)
from .lowrank import ALSFailure, SVDNonConvergence
from .metrics import (
    count_macs,
    layer_macs,
    load_report,
    records_from_report,
    render_table,
)
from .model_ir import Model, ShapeError, count_params
from .runtime import TrainConfig, TrainingFault, evaluate_top1, reference_cnn, train

log = logging.getLogger("deltarank")

EXIT_OK, EXIT_CONFIG, EXIT_FAULT, EXIT_DELTA = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schema

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(text):
    try:
        return _BOOL[text.lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {text!r}") from None


def _parse_floats(text):
    return tuple(float(p) for p in text.replace(",", " ").split())


def _parse_pair(text):
    parts = text.split()
    if len(parts) != 2:
        raise ValueError(f"expected two paths (train test), got {len(parts)}")
    return tuple(parts)


def _parse_synth(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"expected n,classes,hw,seed, got {text!r}")
    return tuple(int(p) for p in parts)


def _parser_for(tp):
    if tp is bool or tp == "bool":
        return _parse_bool
    if tp in (int, "int"):
        return int
    if tp in (float, "float"):
        return float
    if tp in ("tuple[float, ...]",):
        return _parse_floats
    return str


def _schema():
    keys = {}
    for f in dataclasses.fields(OptimizationConfig):
        if f.name == "anneal":
            continue
        keys[f.name] = (_parser_for(f.type), f.default)
    for f in dataclasses.fields(AnnealSchedule):
        keys[f"anneal_{f.name}"] = (_parser_for(f.type), f.default)
    keys.update({
        "model": (str, None),
        "out": (str, None),
        "report": (str, None),
        "device": (str, "cpu:1"),
        "synth": (_parse_synth, None),
        "idx_images": (_parse_pair, None),
        "idx_labels": (_parse_pair, None),
        "num_classes": (int, None),
        # baseline training (`train` subcommand)
        "train_epochs": (int, 6),
        "train_lr": (float, 0.01),
        "train_batch_size": (int, 32),
        "train_augment": (_parse_bool, False),
    })
    return keys


SCHEMA = _schema()


@dataclass
class CliConfig:
    opt: OptimizationConfig
    values: dict
    sources: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def require(self, *names):
        for name in names:
            if self.values.get(name) is None:
                flag = "--" + name.replace("_", "-")
                raise ConfigError(f"missing required key '{name}' (config file or {flag})")


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Parse ``key = value`` lines; returns (values, {key: "source:line"})."""
    values, where = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        loc = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{loc}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{loc}: unknown key '{key}'")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{loc}: bad value for '{key}': {exc}") from None
        where[key] = loc
    return values, where


def _workers_from_device(device: str) -> int:
    kind, _, n = device.partition(":")
    if kind != "cpu" or not n.isdigit() or int(n) < 1:
        raise ValueError(
            f"device {device!r} is not supported; only 'cpu:<workers>' is available "
            "(no GPU or multi-node backends)"
        )
    return int(n)


def _blame(message: str, where: dict) -> str:
    # validation messages start with the offending field name
    head = message.split(" ", 2)
    for key in ("_".join(head[:2]), head[0]):
        if key in where:
            return f"{where[key]}: {message}"
    return message


def build_config(file_values: dict, overrides: dict, where: dict | None = None) -> CliConfig:
    """Merge defaults, file values and flag overrides (flags win) and validate."""
    where = dict(where or {})
    values = {k: default for k, (_, default) in SCHEMA.items()}
    values.update(file_values)
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
            where[k] = f"--{k.replace('_', '-')}"
    try:
        device_workers = _workers_from_device(values["device"])
    except ValueError as exc:
        raise ConfigError(_blame(str(exc), where)) from None
    if "workers" in where and "device" in where and values["workers"] != device_workers:
        raise ConfigError(f"{where['workers']}: workers = {values['workers']} conflicts "
                          f"with device = {values['device']}")
    if "workers" not in where:
        values["workers"] = device_workers
    try:
        anneal = AnnealSchedule(**{f.name: values[f"anneal_{f.name}"]
                                   for f in dataclasses.fields(AnnealSchedule)})
        opt = OptimizationConfig(
            anneal=anneal,
            **{f.name: values[f.name] for f in dataclasses.fields(OptimizationConfig)
               if f.name != "anneal"},
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(_blame(str(exc), where)) from None
    if values["synth"] is not None and values["idx_images"] is not None:
        raise ConfigError("give either synth or idx_images/idx_labels, not both")
    return CliConfig(opt, values, where)


# ---------------------------------------------------------------- data


def load_datasets(cfg: CliConfig) -> tuple[Dataset, Dataset, dict]:
    if cfg.synth is not None:
        n, classes, hw, seed = cfg.synth
        meta = {"kind": "synth", "n_per_class": n, "num_classes": classes, "hw": hw,
                "seed": seed, "test_seed": seed + 1}
        try:
            return synth_shapes(n, classes, hw, seed), synth_shapes(n, classes, hw, seed + 1), meta
        except DataError as exc:
            raise ConfigError(f"synth: {exc}") from None
    if cfg.idx_images is None or cfg.idx_labels is None:
        raise ConfigError("missing dataset: give --synth n,classes,hw,seed or both "
                          "--idx-images TRAIN TEST and --idx-labels TRAIN TEST")
    (tri, tei), (trl, tel) = cfg.idx_images, cfg.idx_labels
    train_set = load_idx(tri, trl, cfg.num_classes)
    test_set = load_idx(tei, tel, cfg.num_classes or train_set.num_classes)
    meta = {"kind": "idx", "train_images": Path(tri).name, "train_labels": Path(trl).name,
            "test_images": Path(tei).name, "test_labels": Path(tel).name}
    return train_set, test_set, meta


def _normalized(model: Model, *sets):
    if model.norm_mean is None:
        return sets
    stats = (model.norm_mean, model.norm_std)
    return tuple(normalize_dataset(d, stats) for d in sets)


def _check_compatible(model: Model, data: Dataset):
    if data.images.shape[1:] != model.input_shape:
        raise ConfigError(f"dataset images {data.images.shape[1:]} do not match model input "
                          f"{model.input_shape}")
    if data.num_classes > model.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, model {model.num_classes}")


# ---------------------------------------------------------------- commands


def cmd_train(cfg: CliConfig) -> int:
    cfg.require("out")
    train_set, test_set, meta = load_datasets(cfg)
    stats = znorm_stats(train_set)
    model = reference_cnn(train_set.images.shape[1:], train_set.num_classes, seed=cfg.opt.seed)
    model = model.with_norm(*stats)
    trn, tst = _normalized(model, train_set, test_set)
    tc = TrainConfig(
        epochs=cfg.train_epochs, batch_size=cfg.train_batch_size, lr=cfg.train_lr,
        momentum=cfg.opt.momentum, weight_decay=cfg.opt.weight_decay, seed=cfg.opt.seed,
        workers=cfg.opt.workers,
        augment=AugmentConfig(cfg.opt.crop_fraction, cfg.opt.flip_prob) if cfg.train_augment else None,
    )
    model, history = train(
        model, trn, tc,
        on_epoch=lambda e, loss, _m: log.info("train epoch %d loss %.6f", e, loss),
    )
    model = checkpoint.round_to_f32(model)
    checkpoint.save(model, cfg.out)
    print(f"test top-1: {evaluate_top1(model, tst):.4f}")
    print(f"saved {cfg.out}")
    return EXIT_OK


def cmd_optimize(cfg: CliConfig) -> int:
    from .conductor import run_pipeline

    cfg.require("model", "out", "report")
    model = checkpoint.load(cfg.model)
    train_set, test_set, meta = load_datasets(cfg)
    _check_compatible(model, train_set)
    trn, tst = _normalized(model, train_set, test_set)
    log.info("effective config: %s", dataclasses.asdict(cfg.opt))
    result = run_pipeline(model, trn, tst, cfg.opt, meta)
    checkpoint.save(result.model, cfg.out)
    Path(cfg.report).write_text(result.report_text)
    sys.stdout.write(result.table_text)
    print(f"validation drop {result.val_drop:.4f}, test drop {result.test_drop:.4f}")
    if result.delta_not_met:
        print(f"delta_not_met: validation drop exceeds delta={cfg.opt.delta}")
        return EXIT_DELTA
    return EXIT_OK


def cmd_eval(cfg: CliConfig) -> int:
    cfg.require("model")
    model = checkpoint.load(cfg.model)
    train_set, test_set, _ = load_datasets(cfg)
    _check_compatible(model, test_set)
    (tst,) = _normalized(model, test_set)
    print(f"test top-1: {evaluate_top1(model, tst):.4f}")
    return EXIT_OK


def cmd_inspect(cfg: CliConfig) -> int:
    cfg.require("model")
    model = checkpoint.load(cfg.model)
    shapes = (model.input_shape, *model.shapes)
    print(f"{'#':>3}  {'layer':<24}{'output':<16}{'params':>10}{'MACs':>12}")
    for i, layer in enumerate(model.layers):
        macs = layer_macs(layer, shapes[i], shapes[i + 1])
        extra = f" r={layer.rank}" if hasattr(layer, "rank") else ""
        print(f"{i:>3}  {type(layer).__name__ + extra:<24}{str(shapes[i + 1]):<16}"
              f"{layer.num_params():>10}{macs:>12}")
    print(f"total params {count_params(model)}, MACs {count_macs(model)}")
    return EXIT_OK


def cmd_report(cfg: CliConfig) -> int:
    cfg.require("report")
    doc = load_report(Path(cfg.report).read_text())
    records, enh = records_from_report(doc)
    sys.stdout.write(render_table(records, enh))
    flags = doc.get("flags", {})
    if flags.get("delta_not_met"):
        print("delta_not_met")
        return EXIT_DELTA
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "report": cmd_report,
}


# ---------------------------------------------------------------- argv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deltarank", description="Accuracy-bounded low-rank model compression.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--delta", type=float)
    p.add_argument("--stage", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--device")
    p.add_argument("--idx-images", nargs=2, metavar=("TRAIN", "TEST"))
    p.add_argument("--idx-labels", nargs=2, metavar=("TRAIN", "TEST"))
    p.add_argument("--synth", type=_parse_synth, metavar="N,CLASSES,HW,SEED")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> CliConfig:
    file_values, where = {}, {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        file_values, where = parse_config_text(text, args.config)
    overrides = {
        k: getattr(args, k)
        for k in ("model", "out", "report", "delta", "stage", "seed", "workers", "device",
                  "synth", "idx_images", "idx_labels")
    }
    for k in ("idx_images", "idx_labels"):
        if overrides[k] is not None:
            overrides[k] = tuple(overrides[k])
    return build_config(file_values, overrides, where)


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingFault, checkpoint.CheckpointError, DataError, ShapeError,
            SVDNonConvergence, ALSFailure, OSError) as exc:
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())

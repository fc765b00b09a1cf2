"""Command-line entry point: ``python -m tadkd <command> ...``.

Every run directory receives ``config.json`` (fully resolved, replayable with
``--config``), ``record.csv``, ``eval.json`` and ``model.ckpt``. Failures print a
single ``error: <category>: <detail>`` line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import detector as det
from . import synth_data as sd
from .distill import DistillConfig
from .evaluation import evaluate
from .experiments import GRIDS, AblationRowError, CapacityOrderError, progressive_distill, run_ablation
from .geometry import MaskConfig
from .training import RunRecord, TrainConfig, TrainingDivergedError, train_detector

COMMANDS = ("gen-data", "train", "distill", "progressive", "eval", "ablate")
CAPACITIES = {"teacher": det.DetectorConfig.teacher, "medium": det.DetectorConfig.medium,
              "student": det.DetectorConfig.student}
SEED_ENV = "TADKD_SEED"
CONFIG_VERSION = 1


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(f"{category}: {detail}")
        self.category = category
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ------------------------------------------------------------------- parsing
def _add_run_flags(p: argparse.ArgumentParser, capacity_default: str = "student") -> None:
    p.add_argument("--data", help="dataset root containing train/ val/ test/ (from gen-data)")
    p.add_argument("--out", required=True, help="run directory (created if absent)")
    p.add_argument("--config", help="resolved config.json of an earlier run to replay")
    p.add_argument("--force", action="store_true", help="overwrite a completed run directory")
    p.add_argument("--seed", type=int, help=f"training seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--epochs", type=int, help="training epochs T (default 12)")
    p.add_argument("--batch-size", type=int, help="images per SGD step (default 8)")
    p.add_argument("--lr", type=float, help="base learning rate (default 0.01)")
    p.add_argument("--train-limit", type=int, help="use only the first N training scenes")
    p.add_argument("--capacity", choices=sorted(CAPACITIES),
                   help=f"detector size preset (default {capacity_default})")


def _add_distill_flags(p: argparse.ArgumentParser) -> None:
    d = DistillConfig()
    p.add_argument("--beta1", type=float, help=f"classification distillation weight (default {d.beta1:g})")
    p.add_argument("--beta2", type=float, help=f"regression distillation weight (default {d.beta2:g})")
    p.add_argument("--lam", type=float, help=f"backbone imitation weight (default {d.lam:g})")
    p.add_argument("--mask", choices=["gaussian", "rectangle", "all"], help="backbone mask mode (default gaussian)")
    p.add_argument("--sigma-sq", type=float, help=f"Gaussian mask variance for both axes (default {d.mask.sigma_x_sq:g})")
    p.add_argument("--no-decay", action="store_true", help="keep distillation weights constant over training")
    p.add_argument("--no-backbone", action="store_true", help="disable backbone imitation")
    p.add_argument("--no-cls", action="store_true", help="disable classification distillation")
    p.add_argument("--no-reg", action="store_true", help="disable regression distillation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tadkd", description="Teacher-student distillation for a miniature two-stage detector.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset root; train/ val/ test/ are written below it")
    g.add_argument("--train", type=int, default=2000, help="training scenes (default 2000)")
    g.add_argument("--val", type=int, default=200, help="validation scenes (default 200)")
    g.add_argument("--test", type=int, default=500, help="test scenes (default 500)")
    g.add_argument("--seed", type=int, help=f"dataset seed (fallback: ${SEED_ENV}, then 0)")
    g.add_argument("--config", help="JSON file with SceneConfig fields")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    t = sub.add_parser("train", help="train a detector without a teacher")
    _add_run_flags(t)

    d = sub.add_parser("distill", help="train a student distilled from a frozen teacher checkpoint")
    _add_run_flags(d)
    d.add_argument("--teacher", help="teacher model.ckpt")
    _add_distill_flags(d)

    p = sub.add_parser("progressive", help="chain distillation through decreasing capacities")
    _add_run_flags(p)
    p.add_argument("--capacities", help="comma-separated presets, largest first (default teacher,medium,student)")
    _add_distill_flags(p)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True, help="dataset root or split directory")
    e.add_argument("--model", required=True, help="model.ckpt to evaluate")
    e.add_argument("--split", default="test", help="split under --data (default test)")
    e.add_argument("--voc11", action="store_true", help="11-point interpolated AP instead of all-points")
    e.add_argument("--out", help="directory to write eval.json into (stdout only when absent)")
    e.add_argument("--force", action="store_true", help="overwrite an existing eval.json")

    a = sub.add_parser("ablate", help="train one student per grid row and rank them")
    _add_run_flags(a)
    a.add_argument("--teacher", help="teacher model.ckpt shared by all rows")
    a.add_argument("--grid", choices=sorted(GRIDS), help="row set (default table1)")
    a.add_argument("--jobs", type=int, default=1, help="grid rows trained in parallel threads (default 1)")
    _add_distill_flags(a)
    return parser


# ------------------------------------------------------------------- helpers
def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError("missing-file", f"{path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CliError("bad-config", f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError("bad-config", f"{path}: top level must be an object")
    return data


def _resolve_seed(flag: Optional[int], stored: Optional[int]) -> int:
    if flag is not None:
        return flag
    if stored is not None:
        return int(stored)
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise CliError("bad-config", f"{SEED_ENV}={env!r} is not an integer") from exc


def _prepare_out(out, force: bool, marker: str = "eval.json") -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError("bad-config", f"--out {out} exists and is not a directory")
    if (out / marker).exists() and not force:
        raise CliError("run-exists", f"{out} holds a completed run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_record(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RunRecord.CSV_COLUMNS)
        writer.writerows(record.csv_rows())


def _split_dir(data, split: str) -> Path:
    root = Path(data)
    path = root / split
    if (path / "index.json").is_file():
        return path
    if split != "train" and (root / "index.json").is_file():
        return root
    raise CliError("missing-file", f"no {split} split under {root} (expected {path / 'index.json'})")


def _read_split(data, split: str, limit: Optional[int] = None):
    path = _split_dir(data, split)
    try:
        scenes = sd.read_dataset(path)
    except sd.DatasetError as exc:
        raise CliError("bad-data", f"{path}: {exc}") from exc
    return scenes[:limit] if limit else scenes


def _optional_split(data, split: str):
    try:
        return _read_split(data, split)
    except CliError as exc:
        if exc.category == "missing-file":
            return None
        raise


def _load_model(path, frozen: bool = True) -> det.DetectorModel:
    if not Path(path).is_file():
        raise CliError("missing-file", f"checkpoint {path} does not exist")
    try:
        return det.load_checkpoint(path, frozen=frozen)
    except det.CheckpointError as exc:
        raise CliError("bad-checkpoint", f"{path}: {exc}") from exc


def _distill_from_args(args, stored: Optional[dict]) -> DistillConfig:
    cfg = DistillConfig.from_dict(stored) if stored else DistillConfig()
    updates = {}
    for name in ("beta1", "beta2", "lam"):
        if getattr(args, name, None) is not None:
            updates[name] = getattr(args, name)
    mask = cfg.mask
    if getattr(args, "mask", None) is not None:
        mask = replace(mask, mode=args.mask)
    if getattr(args, "sigma_sq", None) is not None:
        mask = replace(mask, sigma_x_sq=args.sigma_sq, sigma_y_sq=args.sigma_sq)
    updates["mask"] = MaskConfig(mask.mode, mask.sigma_x_sq, mask.sigma_y_sq)
    if getattr(args, "no_decay", False):
        updates["decay_enabled"] = False
    for flag, key in (("no_backbone", "enable_backbone"), ("no_cls", "enable_cls"), ("no_reg", "enable_reg")):
        if getattr(args, flag, False):
            updates[key] = False
    return replace(cfg, **updates)


def resolve_run_config(args, command: str) -> dict:
    """Merge defaults < ``--config`` file < explicit flags into a self-contained config dict."""
    stored = _load_json(args.config) if args.config else {}
    if stored and stored.get("command") not in (None, command):
        raise CliError("bad-config", f"config was written by {stored.get('command')!r}, not {command!r}")
    try:
        train = dict(stored.get("train") or {})
        for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
            if getattr(args, flag) is not None:
                train[key] = getattr(args, flag)
        train["seed"] = _resolve_seed(args.seed, train.get("seed"))
        stored_distill = train.pop("distill", None)
        train_cfg = TrainConfig(**train)
        if command in ("distill", "progressive", "ablate"):
            train_cfg = replace(train_cfg, distill=_distill_from_args(args, stored_distill))
        capacity = args.capacity or stored.get("capacity") or "student"
        det_dict = stored.get("detector")
        if args.capacity is not None or det_dict is None:
            det_cfg = CAPACITIES[capacity]()
        else:
            det_cfg = det.DetectorConfig.from_dict(det_dict)
        config = {
            "version": CONFIG_VERSION,
            "command": command,
            "data": args.data if args.data is not None else stored.get("data"),
            "train_limit": args.train_limit if args.train_limit is not None else stored.get("train_limit"),
            "capacity": capacity,
            "train": train_cfg.to_dict(),
            "detector": det_cfg.to_dict(),
        }
        if command in ("distill", "ablate"):
            config["teacher"] = args.teacher if args.teacher is not None else stored.get("teacher")
        if command == "ablate":
            config["grid"] = args.grid or stored.get("grid") or "table1"
        if command == "progressive":
            caps = args.capacities or stored.get("capacities") or "teacher,medium,student"
            if isinstance(caps, str):
                caps = [c.strip() for c in caps.split(",") if c.strip()]
            unknown = [c for c in caps if c not in CAPACITIES]
            if unknown:
                raise CliError("bad-config", f"unknown capacity preset(s) {unknown}; choose from {sorted(CAPACITIES)}")
            config["capacities"] = caps
    except CliError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("bad-config", str(exc)) from exc
    if not config["data"]:
        raise CliError("bad-config", "--data is required (or a config.json that names it)")
    if command in ("distill", "ablate") and not config.get("teacher"):
        raise CliError("bad-config", "--teacher is required")
    return config


def _print(msg: str) -> None:
    print(msg, flush=True)


def _finish_run(out: Path, model: det.DetectorModel, record: RunRecord) -> None:
    _write_record(out / "record.csv", record)
    det.save_checkpoint(model, out / "model.ckpt")
    _write_json(out / "eval.json", record.final.to_dict())
    _print(f"final mAP@0.5={record.final.map50:.4f} mAP@[.5:.95]={record.final.map50_95:.4f} -> {out}")


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    scene_cfg = sd.SceneConfig()
    if args.config:
        try:
            scene_cfg = sd.SceneConfig.from_dict(_load_json(args.config))
        except (TypeError, ValueError) as exc:
            raise CliError("bad-config", str(exc)) from exc
    for name in ("train", "val", "test"):
        if getattr(args, name) < 0:
            raise CliError("bad-config", f"--{name} must be >= 0")
    seed = _resolve_seed(args.seed, None)
    root = Path(args.out)
    if root.exists() and not root.is_dir():
        raise CliError("bad-config", f"--out {root} exists and is not a directory")
    if any((root / s / "index.json").exists() for s in ("train", "val", "test")) and not args.force:
        raise CliError("run-exists", f"{root} already holds a dataset; pass --force to overwrite")
    for split in ("train", "val", "test"):
        count = getattr(args, split)
        scenes = sd.generate_split(sd.split_seeds(seed, split, count), scene_cfg)
        sd.write_dataset(scenes, root / split, scene_cfg)
        _print(f"{split}: {count} scenes -> {root / split}")
    return 0


def cmd_train(args, command: str = "train") -> int:
    config = resolve_run_config(args, command)
    out = _prepare_out(args.out, args.force)
    train = _read_split(config["data"], "train", config["train_limit"])
    val = _optional_split(config["data"], "val")
    test = _optional_split(config["data"], "test") or val or train
    teacher = None
    if command == "distill":
        teacher = _load_model(config["teacher"])
        teacher_cfg = teacher.config
        try:
            det.check_distill_pair(det.DetectorConfig.from_dict(config["detector"]), teacher_cfg)
        except det.ConfigMismatchError as exc:
            raise CliError("bad-config", str(exc)) from exc
    _write_json(out / "config.json", config)
    train_cfg = TrainConfig.from_dict(config["train"])
    model, record = train_detector(train, train_cfg, det.DetectorConfig.from_dict(config["detector"]), teacher,
                                   val_scenes=val, log=_print, final_eval_scenes=test)
    _finish_run(out, model, record)
    return 0


def cmd_progressive(args) -> int:
    config = resolve_run_config(args, "progressive")
    out = _prepare_out(args.out, args.force, marker="summary.csv")
    train = _read_split(config["data"], "train", config["train_limit"])
    val = _optional_split(config["data"], "val")
    test = _optional_split(config["data"], "test") or val or train
    configs = [CAPACITIES[c]() for c in config["capacities"]]
    try:
        from .experiments import check_capacity_order

        check_capacity_order(configs)
    except (CapacityOrderError, det.ConfigMismatchError) as exc:
        raise CliError("bad-config", str(exc)) from exc
    _write_json(out / "config.json", config)

    def save(k, model, record):
        stage = out / f"stage{k}_{config['capacities'][k]}"
        stage.mkdir(exist_ok=True)
        _finish_run(stage, model, record)

    result = progressive_distill(train, configs, TrainConfig.from_dict(config["train"]), val, test, log=_print,
                                 stage_callback=save)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "capacity", "parameter_count", "map50", "map50_95"])
        for k, rep in enumerate(result.reports):
            writer.writerow([k, config["capacities"][k], rep.parameter_count, repr(rep.map50), repr(rep.map50_95)])
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    scenes = _read_split(args.data, args.split)
    report = evaluate(model, scenes, voc11=args.voc11).to_dict()
    if args.out:
        out = _prepare_out(args.out, args.force)
        _write_json(out / "eval.json", report)
    _print(json.dumps(report, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = resolve_run_config(args, "ablate")
    config["jobs"] = args.jobs
    out = _prepare_out(args.out, args.force, marker="summary.csv")
    train = _read_split(config["data"], "train", config["train_limit"])
    val = _optional_split(config["data"], "val")
    test = _optional_split(config["data"], "test") or val or train
    teacher = _load_model(config["teacher"])
    train_cfg = TrainConfig.from_dict(config["train"])
    grid = GRIDS[config["grid"]](train_cfg.distill)
    _write_json(out / "config.json", config)
    table = run_ablation(train, test, train_cfg, grid, teacher, det.DetectorConfig.from_dict(config["detector"]),
                         jobs=args.jobs, val_scenes=val, log=_print)
    for res in table.results:
        if res.record is not None:
            row_dir = out / res.row.name
            row_dir.mkdir(exist_ok=True)
            _write_record(row_dir / "record.csv", res.record)
            _write_json(row_dir / "eval.json", res.report.to_dict())
    (out / "summary.csv").write_text(table.to_csv(), encoding="utf-8")
    _print(table.format())
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": lambda a: cmd_train(a, "distill"),
    "progressive": cmd_progressive,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
            raise CliError("unknown-command", f"{argv[0]!r} (expected one of {', '.join(COMMANDS)})")
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise CliError("unknown-command", f"no command given (expected one of {', '.join(COMMANDS)})")
        return HANDLERS[args.command](args)
    except CliError as exc:
        print(f"error: {exc.category}: {exc.detail}", file=sys.stderr)
        return 1
    except AblationRowError as exc:
        print(f"error: training-failed: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: training-failed: {exc}", file=sys.stderr)
        return 1
    except det.ConfigMismatchError as exc:
        print(f"error: bad-config: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

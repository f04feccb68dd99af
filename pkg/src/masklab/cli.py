"""Command-line orchestration: synthesize scene datasets, refine predicted
masks, fit composed classifiers, evaluate, and aggregate run records.

All numeric hyperparameters live in a JSON config with one section per
module; flags only pick the subcommand, seed, output directory, parallelism,
and the two refinement knobs (iterations, learning rate). Every command
echoes its effective config into the output directory. Exit codes: 0 on
success, 2 for config problems, 3 for data problems.
"""

import argparse
import csv
import dataclasses
import glob
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .evaluation import AllocationStats, EvalConfig, allocate_scene, evaluate_scenes
from .imr import IMRConfig, refine_scene
from .io_formats import (FormatError, read_scene, write_eval_report,
                         write_scene, write_tensor)
from .losses import LossConfig
from .ncc import (NCCConfig, export_alpha, fit_alpha, make_recovery_problem,
                  predict_logits, write_alpha_csv)
from .synthgen import SynthConfig, add_predictions, generate_scene

CONFIG_ECHO_NAME = "effective_config.json"
RUN_RECORDS_NAME = "run_records.json"
SCENE_PATTERN = "scene_*.json"

# Config keys that may differ between runs aggregated by `report`.
VOLATILE_KEYS = ("seed", "jobs", "input_dir", "output_dir")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    n_scenes: int = 8
    input_dir: str = None
    output_dir: str = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    imr: IMRConfig = field(default_factory=IMRConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    ncc: NCCConfig = field(default_factory=NCCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed: must be an unsigned 64-bit value, got {self.seed}")
        if self.jobs < 1:
            raise ConfigError(f"jobs: must be >= 1, got {self.jobs}")
        if self.n_scenes < 1:
            raise ConfigError(f"n_scenes: must be >= 1, got {self.n_scenes}")
        for name in ("input_dir", "output_dir"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{name}: must be a string path, got {value!r}")
        try:
            self.synth.validate()
            self.imr.validate()
            self.losses.validate()
            self.ncc.validate()
            self.eval.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _coerce(current, value, path):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    # Fields defaulting to None take strings, numbers, or null.
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _update_dataclass(obj, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown key {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _update_dataclass(current, value, where)
        else:
            setattr(obj, key, _coerce(current, value, where))


def load_run_config(path):
    """Parse and validate a config file; missing sections keep defaults."""
    config = RunConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        _update_dataclass(config, raw, "")
    return config.validate()


def _apply_overrides(config, args):
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs is not None:
        config.jobs = args.jobs
    if args.out is not None:
        config.output_dir = args.out
    if getattr(args, "iterations", None) is not None:
        config.imr.iterations = args.iterations
    if getattr(args, "lr", None) is not None:
        config.imr.lr = args.lr
    return config.validate()


def _require_out(config):
    if config.output_dir is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    os.makedirs(config.output_dir, exist_ok=True)
    return config.output_dir


def _require_input(config):
    if config.input_dir is None:
        raise ConfigError("no input directory: set input_dir in the config")
    if not os.path.isdir(config.input_dir):
        raise DataError(f"input directory {config.input_dir} does not exist")
    return config.input_dir


def _echo_config(config, out_dir):
    doc = dataclasses.asdict(config)
    with open(os.path.join(out_dir, CONFIG_ECHO_NAME), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _scene_paths(directory):
    paths = sorted(glob.glob(os.path.join(directory, SCENE_PATTERN)))
    if not paths:
        raise DataError(f"no scene documents matching {SCENE_PATTERN} in {directory}")
    return paths


def _parallel_map(fn, items, jobs):
    """Order-stable map; jobs=1 stays in-process."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _synth_worker(item):
    synth_config, seed, scene_id, out_dir = item
    scene = generate_scene(synth_config, seed, scene_id)
    add_predictions(scene, synth_config)
    write_scene(os.path.join(out_dir, f"scene_{scene_id:05d}.json"), scene)
    return scene_id


def cmd_synth(config):
    out_dir = _require_out(config)
    items = [(config.synth, config.seed, scene_id, out_dir)
             for scene_id in range(config.n_scenes)]
    _parallel_map(_synth_worker, items, config.jobs)
    _echo_config(config, out_dir)
    return 0


def _refine_worker(item):
    path, out_dir, imr_config, seed = item
    scene = read_scene(path)
    refined, records = refine_scene(scene, imr_config, seed)
    write_scene(os.path.join(out_dir, os.path.basename(path)), refined)
    return records


def cmd_refine(config):
    in_dir = _require_input(config)
    out_dir = _require_out(config)
    items = [(path, out_dir, config.imr, config.seed)
             for path in _scene_paths(in_dir)]
    all_records = []
    for records in _parallel_map(_refine_worker, items, config.jobs):
        all_records.extend(records)
    with open(os.path.join(out_dir, RUN_RECORDS_NAME), "w", encoding="utf-8") as fh:
        json.dump(all_records, fh, indent=2)
        fh.write("\n")
    _echo_config(config, out_dir)
    return 0


def cmd_ncc_fit(config):
    out_dir = _require_out(config)
    ncc = config.ncc
    problem = make_recovery_problem(ncc.d, ncc.n_base, ncc.r, ncc.n_novel,
                                    ncc.samples_per_class, config.seed)
    alpha, trace = fit_alpha(
        problem.basis, problem.dataset, loss=ncc.loss,
        iterations=ncc.iterations, lr=ncc.optimizer.lr, seed=config.seed,
        n_novel=ncc.n_novel, weight_decay=ncc.optimizer.weight_decay,
        focal_alpha=config.losses.focal_alpha,
        focal_gamma=config.losses.focal_gamma,
        mixup_beta=config.losses.mixup_beta,
    )
    write_tensor(os.path.join(out_dir, "alpha.mft"), alpha)
    base_names = [f"base_{i}" for i in range(ncc.n_base)]
    novel_names = [f"novel_{i}" for i in range(ncc.n_novel)]
    report = export_alpha(alpha, base_names, novel_names,
                          topk=min(20, ncc.n_base))
    write_alpha_csv(os.path.join(out_dir, "alpha.csv"), report)
    features = np.stack([f for f, _ in problem.dataset])
    labels = np.asarray([label for _, label in problem.dataset])
    accuracy = float(np.mean(predict_logits(problem.basis, alpha, features)
                             .argmax(axis=1) == labels))
    with open(os.path.join(out_dir, "ncc_fit.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "final_loss": trace[-1],
            "train_accuracy": accuracy,
            "coefficients": int(alpha.size),
            "loss_trace": trace,
        }, fh, indent=2)
        fh.write("\n")
    _echo_config(config, out_dir)
    return 0


def cmd_eval(config, alloc, metric):
    in_dir = _require_input(config)
    out_dir = _require_out(config)
    scenes = [read_scene(path) for path in _scene_paths(in_dir)]
    allocation = None
    if alloc != "none":
        stats = AllocationStats()
        allocated = []
        for scene in scenes:
            scene, scene_stats = allocate_scene(scene, alloc,
                                                config.eval.allocation_min_iou)
            stats.merge(scene_stats)
            allocated.append(scene)
        scenes = allocated
        allocation = {
            "mode": alloc,
            "passthrough_no_gt": stats.passthrough_no_gt,
            "passthrough_gated": stats.passthrough_gated,
        }
    report = evaluate_scenes(scenes, config.eval)
    write_eval_report(report,
                      os.path.join(out_dir, "eval_report.json"),
                      os.path.join(out_dir, "eval_report.csv"),
                      metrics=metric, allocation=allocation)
    _echo_config(config, out_dir)
    return 0


def _comparable_config(doc):
    return {k: v for k, v in doc.items() if k not in VOLATILE_KEYS}


def _load_run_dir(run_dir):
    records_path = os.path.join(run_dir, RUN_RECORDS_NAME)
    echo_path = os.path.join(run_dir, CONFIG_ECHO_NAME)
    with open(records_path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    if not os.path.exists(echo_path):
        raise DataError(f"{run_dir}: missing {CONFIG_ECHO_NAME}")
    with open(echo_path, "r", encoding="utf-8") as fh:
        echo = json.load(fh)
    return records, echo


def _summarize(records):
    improvements = []
    init_ious = []
    refined_ious = []
    early_fractions = []
    n_energy_drop = 0
    n_aborted = 0
    n_traced = 0
    for rec in records:
        if rec.get("aborted"):
            n_aborted += 1
        if rec.get("init_iou") is not None and rec.get("refined_iou") is not None:
            init_ious.append(rec["init_iou"])
            refined_ious.append(rec["refined_iou"])
            improvements.append(rec["refined_iou"] - rec["init_iou"])
        trace = rec.get("energy_trace") or []
        if len(trace) >= 2:
            n_traced += 1
            total = trace[0] - trace[-1]
            if trace[-1] <= trace[0]:
                n_energy_drop += 1
            if total > 0:
                early = trace[0] - trace[min(5, len(trace) - 1)]
                early_fractions.append(early / total)
    summary = [("n_records", len(records)), ("n_aborted", n_aborted)]
    if improvements:
        improvements = np.asarray(improvements)
        summary.extend([
            ("mean_init_iou", float(np.mean(init_ious))),
            ("mean_refined_iou", float(np.mean(refined_ious))),
            ("mean_improvement", float(np.mean(improvements))),
            ("median_improvement", float(np.median(improvements))),
            ("frac_improved", float(np.mean(improvements >= 0))),
        ])
    if n_traced:
        summary.append(("frac_energy_decreased", n_energy_drop / n_traced))
    if early_fractions:
        summary.append(("median_early_drop_fraction",
                        float(np.median(early_fractions))))
    return summary


def cmd_report(config):
    in_dir = _require_input(config)
    out_dir = _require_out(config)
    candidates = [in_dir] + sorted(
        p for p in glob.glob(os.path.join(in_dir, "*")) if os.path.isdir(p))
    run_dirs = [d for d in candidates
                if os.path.exists(os.path.join(d, RUN_RECORDS_NAME))]
    if not run_dirs:
        raise DataError(f"no {RUN_RECORDS_NAME} found under {in_dir}")
    all_records = []
    reference = None
    for run_dir in run_dirs:
        records, echo = _load_run_dir(run_dir)
        comparable = _comparable_config(echo)
        if reference is None:
            reference = comparable
        elif comparable != reference:
            raise DataError(
                f"{run_dir}: config differs from {run_dirs[0]}; "
                "refusing mixed-config aggregation"
            )
        all_records.extend(records)
    summary = _summarize(all_records)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in summary:
            writer.writerow([name, repr(value) if isinstance(value, float) else value])
    _echo_config(config, out_dir)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="masklab",
        description="Synthetic-scene mask refinement, classifier composition, "
                    "and AP evaluation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", default=None,
                        help="JSON config file; omitted sections use defaults")
        sp.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the global seed")
        sp.add_argument("--out", metavar="DIR", default=None,
                        help="output directory (overrides output_dir)")
        sp.add_argument("--jobs", type=int, default=None, metavar="N",
                        help="worker processes")

    common(sub.add_parser("synth", help="generate scene documents"))
    refine = sub.add_parser("refine", help="refine every prediction's mask head")
    common(refine)
    refine.add_argument("--iterations", type=int, default=None,
                        help="override imr.iterations")
    refine.add_argument("--lr", type=float, default=None,
                        help="override imr.lr")
    common(sub.add_parser("ncc-fit", help="fit composed novel classifiers"))
    ev = sub.add_parser("eval", help="score scenes with AP/FG-AP")
    common(ev)
    ev.add_argument("--alloc", choices=("none", "gt-cls", "gt-mask"),
                    default="none", help="ground-truth allocation mode")
    ev.add_argument("--metric", choices=("ap", "fg-ap", "both"),
                    default="both", help="metrics to emit")
    common(sub.add_parser("report", help="aggregate refine run records"))
    return parser


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = load_run_config(args.config)
        _apply_overrides(config, args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "refine":
            return cmd_refine(config)
        if args.command == "ncc-fit":
            return cmd_ncc_fit(config)
        if args.command == "eval":
            return cmd_eval(config, args.alloc, args.metric)
        return cmd_report(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``kernelga {search,baseline,report,resume,preprocess}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 evaluation error.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import config as config_mod
from .data import (
    SplitSpec,
    load_cache,
    load_idx,
    load_image_dir,
    make_synthetic,
    preprocess_dataset,
    save_cache,
    split_train_val,
)
from .errors import ConfigError, DataFormatError, DegenerateInputError, EvaluationError, StateError
from .ga import latest_checkpoint, load_checkpoint, resume_search, run_search
from .genome import KERNEL_CHOICES
from .trainer import Fitness, append_record, checkpoint_name, fixed_kernel_run

log = logging.getLogger("kernelga")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_EVAL = 0, 1, 2, 3


class DataError(Exception):
    pass


class _StopSearch(Exception):
    pass


def _require(path, what):
    if not path:
        raise DataError(f"data.{what} is not set")
    if not os.path.exists(path):
        raise DataError(f"data path {path} does not exist")
    return path


def _preprocess_options(cfg):
    return {"filters": cfg.data.filters, "polarity": cfg.data.polarity}


def load_dataset(cfg, cache_dir=None):
    """Load (and preprocess, with on-disk caching) the full training pool."""
    d = cfg.data
    try:
        if d.source == "synthetic":
            return make_synthetic(d.synthetic_per_class, cfg.template.num_classes,
                                  cfg.template.input_side, seed=d.synthetic_seed)
        if d.source == "cache":
            return load_cache(_require(d.cache, "cache"))
        if d.source == "idx":
            raw = load_idx(_require(d.train_images, "train_images"), _require(d.train_labels, "train_labels"))
        else:
            raw = load_image_dir(_require(d.image_dir, "image_dir"))
        if not d.preprocess:
            if raw.images.shape[2:] != (cfg.template.input_side,) * 2:
                raise DataError("images are not input_side squares; enable data.preprocess")
            raw.images = raw.images.astype(np.float32) / 255.0
            return raw
        cache_path = None
        if cache_dir is not None:
            fp = hashlib.sha256(json.dumps(
                [raw.provenance.get("source"), cfg.template.input_side, list(d.filters), d.polarity]
            ).encode()).hexdigest()[:16]
            cache_path = os.path.join(cache_dir, f"dataset_{fp}.kgad")
            if os.path.exists(cache_path):
                log.info("using preprocessed cache %s", cache_path)
                return load_cache(cache_path)
        ds = preprocess_dataset(raw, side=cfg.template.input_side, **_preprocess_options(cfg))
        if cache_path is not None:
            os.makedirs(cache_dir, exist_ok=True)
            save_cache(cache_path, ds)
        return ds
    except (DataFormatError, DegenerateInputError, OSError) as exc:
        raise DataError(str(exc)) from exc


def load_split(cfg, cache_dir=None):
    ds = load_dataset(cfg, cache_dir)
    try:
        ds.check(cfg.template.num_classes, cfg.template.input_side)
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
    return split_train_val(ds, SplitSpec(cfg.data.validation_size, cfg.data.split_seed))


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_config(cfg, out):
    _write_json(os.path.join(out, "config.json"),
                {"config": cfg.to_dict(), "config_fingerprint": cfg.fingerprint(),
                 "template_hash": cfg.template.fingerprint()})


def _read_config(out):
    path = os.path.join(out, "config.json")
    try:
        with open(path) as f:
            stored = json.load(f)
        return config_mod.from_dict(stored["config"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise StateError(f"cannot read run config {path}: {exc}") from exc


_worker_fitness = None


def _init_worker(fitness):
    global _worker_fitness
    _worker_fitness = fitness


def _pooled_fitness(genome):
    return _worker_fitness(genome)


def _finish_search(cfg, out, fitness, executor, start_state=None, stop_after=None):
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    extra = {"config_fingerprint": cfg.fingerprint(), "template_hash": cfg.template.fingerprint(), "kind": "search"}

    def on_generation(record):
        if stop_after is not None and record["gen"] >= stop_after:
            raise _StopSearch(record["gen"])

    fn = _pooled_fitness if executor is not None else fitness
    report_path = os.path.join(out, "search_report.json")
    try:
        if start_state is None:
            report = run_search(cfg.ga, cfg.template, fn, executor, ckpt_dir, on_generation, extra)
        else:
            report = resume_search(start_state, cfg.ga, cfg.template, fn, executor, ckpt_dir, on_generation, extra)
    except _StopSearch as stop:
        log.info("stopped after generation %s; continue with: kernelga resume %s", stop.args[0], out)
        return EXIT_OK
    except EvaluationError as exc:
        log.error("evaluation failed for genome %s: %s", exc.genome, exc)
        if exc.report is not None:
            with open(report_path, "w") as f:
                f.write(exc.report.to_json())
        return EXIT_EVAL
    with open(report_path, "w") as f:
        f.write(report.to_json())
    best_ckpt = os.path.join(out, "models", checkpoint_name(report.best_genome))
    if os.path.exists(best_ckpt):
        shutil.copyfile(best_ckpt, os.path.join(out, "best_model.kga"))
    log.info("best genome %s with validation accuracy %.4f", report.best_genome, report.best_fitness)
    return EXIT_OK


def _executor(jobs, fitness):
    if jobs <= 1:
        return None
    return ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(fitness,))


def cmd_search(cfg, stop_after=None) -> int:
    out = cfg.run.output_dir
    train, val = load_split(cfg, cache_dir=out)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    _write_config(cfg, out)
    log_path = os.path.join(out, "evaluations.jsonl")
    for stale in glob.glob(os.path.join(out, "checkpoints", "generation_*.json")):
        os.remove(stale)
    fitness = Fitness(cfg.template, train, val, cfg.train, cfg.run.seed, log_path, os.path.join(out, "models"))
    executor = _executor(cfg.run.jobs, fitness)
    try:
        return _finish_search(cfg, out, fitness, executor, stop_after=stop_after)
    finally:
        if executor is not None:
            executor.shutdown()


def cmd_resume(target, overrides=None, jobs=None) -> int:
    """Continue from a run directory or a ``generation_XXX.json`` file."""
    if os.path.isdir(target):
        out = target
        ckpt = latest_checkpoint(os.path.join(out, "checkpoints")) if os.path.isdir(
            os.path.join(out, "checkpoints")) else None
    else:
        ckpt = target
        out = os.path.dirname(os.path.dirname(os.path.abspath(target)))
    if ckpt is None or not os.path.exists(ckpt):
        raise StateError(f"no generation checkpoint found under {target}")
    state = load_checkpoint(ckpt)
    cfg = _read_config(out)
    if overrides:
        values = {s: {k: (",".join(map(str, v)) if isinstance(v, list) else str(v)) for k, v in items.items()}
                  for s, items in cfg.to_dict().items()}
        cfg = config_mod.build(config_mod.apply_overrides(values, overrides))
    cfg.run.output_dir = out
    if jobs is not None:
        cfg.run.jobs = jobs
    if state["template_hash"] != cfg.template.fingerprint():
        raise ConfigError(f"checkpoint template hash {state['template_hash']} does not match "
                          f"configured template {cfg.template.fingerprint()}")
    if state["generation"] >= cfg.ga.max_generations:
        log.info("run in %s already finished at generation %d", out, state["generation"])
        return EXIT_OK
    train, val = load_split(cfg, cache_dir=out)
    fitness = Fitness(cfg.template, train, val, cfg.train, cfg.run.seed,
                      os.path.join(out, "evaluations.jsonl"), os.path.join(out, "models"))
    executor = _executor(cfg.run.jobs, fitness)
    try:
        return _finish_search(cfg, out, fitness, executor, start_state=state)
    finally:
        if executor is not None:
            executor.shutdown()


def cmd_baseline(cfg, k: int) -> int:
    if k not in KERNEL_CHOICES:
        raise ConfigError(f"--k must be one of {KERNEL_CHOICES}, got {k}")
    out = cfg.run.output_dir
    train, val = load_split(cfg, cache_dir=out)
    os.makedirs(out, exist_ok=True)
    record = fixed_kernel_run(k, cfg.template, train, val, cfg.train, cfg.run.seed,
                              os.path.join(out, f"baseline_k{k}.kga"))
    append_record(os.path.join(out, "evaluations.jsonl"), record)
    _write_json(os.path.join(out, f"baseline_k{k}.json"), {
        "kind": "baseline",
        "kernel": k,
        "config_fingerprint": cfg.fingerprint(),
        "template_hash": cfg.template.fingerprint(),
        "record": record.to_dict(with_timing=False),
    })
    log.info("baseline %dx%d: validation accuracy %.4f", k, k, record.fitness)
    return EXIT_OK


def build_report(run_dir) -> dict:
    rows = []
    search_path = os.path.join(run_dir, "search_report.json")
    if os.path.exists(search_path):
        with open(search_path) as f:
            s = json.load(f)
        rows.append({"method": "evolved (GA)", "genome": s["best_genome"], "val_accuracy": s["best_fitness"],
                     "config_fingerprint": s.get("config_fingerprint")})
    for k in KERNEL_CHOICES:
        path = os.path.join(run_dir, f"baseline_k{k}.json")
        if os.path.exists(path):
            with open(path) as f:
                b = json.load(f)
            rows.append({"method": f"fixed {k}x{k}", "genome": b["record"]["genome"],
                         "val_accuracy": b["record"]["fitness"], "config_fingerprint": b.get("config_fingerprint")})
    if not rows:
        raise DataError(f"no search or baseline artifacts in {run_dir}")
    return {"rows": rows}


def format_report(report: dict) -> str:
    lines = [f"{'Method':<14} | {'Genome':<19} | Validation accuracy", "-" * 58]
    for r in report["rows"]:
        acc = "n/a" if r["val_accuracy"] is None else f"{100 * r['val_accuracy']:.2f} %"
        lines.append(f"{r['method']:<14} | {r['genome'] or '-':<19} | {acc}")
    return "\n".join(lines) + "\n"


def cmd_report(run_dir) -> int:
    if not os.path.isdir(run_dir):
        raise DataError(f"run directory {run_dir} does not exist")
    report = build_report(run_dir)
    text = format_report(report)
    _write_json(os.path.join(run_dir, "report.json"), report)
    with open(os.path.join(run_dir, "report.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_preprocess(cfg, output=None) -> int:
    ds = load_dataset(cfg)
    out = output or os.path.join(cfg.run.output_dir, "dataset.kgad")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_cache(out, ds)
    log.info("wrote %d preprocessed images to %s", len(ds), out)
    return EXIT_OK


def _parse_set(items):
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    return overrides


def _config_args(p):
    p.add_argument("--config", help="INI-style .cfg file")
    p.add_argument("--tiny", action="store_true", help="desk-scale profile (small net, pop 6, 3 generations, 5 epochs)")
    p.add_argument("--seed", type=int, help="master seed (run.seed)")
    p.add_argument("--out", help="output directory (run.output_dir)")
    p.add_argument("--jobs", type=int, help="concurrent fitness evaluations (run.jobs)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")


def _load_config(args):
    overrides = _parse_set(args.set)
    for flag, key in (("seed", "run.seed"), ("out", "run.output_dir"), ("jobs", "run.jobs")):
        if getattr(args, flag) is not None:
            overrides[key] = str(getattr(args, flag))
    return config_mod.load(args.config, tiny=args.tiny, overrides=overrides)


def make_parser():
    parser = argparse.ArgumentParser(prog="kernelga", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"kernelga {__version__} (python {platform.python_version()}, numpy {np.__version__})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the genetic kernel-size search")
    _config_args(p)
    p.add_argument("--stop-after-generation", type=int, metavar="N", help="checkpoint and stop after generation N")

    p = sub.add_parser("baseline", help="train a fixed-kernel network")
    _config_args(p)
    p.add_argument("--k", type=int, required=True, help="kernel size used in every conv layer")

    p = sub.add_parser("report", help="summarize search and baseline results of a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("resume", help="continue a search from its latest checkpoint")
    p.add_argument("target", help="run directory or generation checkpoint file")
    p.add_argument("--jobs", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("preprocess", help="preprocess the configured dataset into a cache file")
    _config_args(p)
    p.add_argument("--output", help="cache file path (default: <out>/dataset.kgad)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("search", "baseline"):
        logging.getLogger("kernelga").setLevel(logging.INFO)
    try:
        if args.command == "search":
            return cmd_search(_load_config(args), stop_after=args.stop_after_generation)
        if args.command == "baseline":
            return cmd_baseline(_load_config(args), args.k)
        if args.command == "report":
            return cmd_report(args.run_dir)
        if args.command == "resume":
            return cmd_resume(args.target, _parse_set(args.set), args.jobs)
        if args.command == "preprocess":
            return cmd_preprocess(_load_config(args), args.output)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, StateError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except EvaluationError as exc:
        log.error("evaluation error: %s", exc)
        return EXIT_EVAL
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

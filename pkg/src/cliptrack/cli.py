"""Batch command-line front end: synth, train, infer, eval, ablate, selfcheck.

Exit codes: 0 success, 1 runtime error, 2 configuration error. Every command
stages its outputs in a scratch directory and moves them into ``--out`` only
on success, so a failed run leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"

log = logging.getLogger("cliptrack")


# ---------------------------------------------------------------- config

def default_config() -> dict:
    from .pipeline import TrainConfig
    from .synthdata import ScenarioConfig
    return {
        "scenario": ScenarioConfig().to_dict(),
        "dataset": {"count": 300, "eval_count": 60},
        "train": TrainConfig().to_dict(),
        "infer": {"n_f_eval": None},
        "eval": {"iou_threshold": 0.5},
        "ablation": {"seeds": [0, 1, 2], "eval_count": 60, "sweep_n_f_train": 3,
                     "sweep_n_f_eval": [1, 3, 5, 7], "memory_modes": True},
    }


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the sections of a YAML file; unknown keys are errors."""
    import yaml

    from .errors import ConfigError
    cfg = default_config()
    if not path:
        return cfg
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, values in doc.items():
        if section not in cfg:
            raise ConfigError(f"{path}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise ConfigError(f"{path}: unknown keys in {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def scenario_of(cfg: dict):
    from .synthdata import ScenarioConfig
    return ScenarioConfig.from_dict(cfg["scenario"]).validate()


def train_config_of(cfg: dict, seed: int | None):
    from .pipeline import TrainConfig
    tc = TrainConfig.from_dict(cfg["train"])
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    return tc.validate()


# ---------------------------------------------------------------- manifest / staging

def git_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_path(path: Path) -> dict[str, str]:
    if path.is_dir():
        return {str(p.relative_to(path)): git_hash(p.read_bytes())
                for p in sorted(path.rglob("*")) if p.is_file() and p.name != MANIFEST}
    return {path.name: git_hash(path.read_bytes())}


class Stage:
    """Scratch directory next to ``out``; committed into ``out`` only on success."""

    def __init__(self, out: str):
        self.out = Path(out)
        parent = self.out.resolve().parent
        # remember the first missing ancestor so a failed run can remove what it created
        self.created = next((a for a in reversed([parent, *parent.parents]) if not a.exists()), None)
        parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".stage-", dir=self.out.parent))

    def path(self, name: str) -> Path:
        return self.dir / name

    def commit(self, manifest: dict):
        manifest["outputs"] = hash_path(self.dir)
        (self.dir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        self.out.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.dir.iterdir()):
            os.replace(p, self.out / p.name)
        shutil.rmtree(self.dir, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)
        if self.created is not None:
            shutil.rmtree(self.created, ignore_errors=True)


def manifest(args, command: str, config: dict | None, inputs: dict, timings: dict) -> dict:
    return {"command": command, "config_path": getattr(args, "config", None),
            "config": config, "seed": getattr(args, "seed", None),
            "inputs": inputs, "output_dir": str(Path(args.out).resolve()), "timings": timings}


# ---------------------------------------------------------------- commands

def parse_nf(text: str | None) -> list[int] | None:
    """``"3"``, ``"1,3,5"`` or ``"1-7"``."""
    from .errors import ConfigError
    if text is None:
        return None
    values: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-"))
                values.extend(range(lo, hi + 1))
            else:
                values.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"bad --nf-eval value {text!r}") from exc
    if not values or min(values) < 1:
        raise ConfigError("--nf-eval values must be >= 1")
    return sorted(set(values))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))  # preserves input order


def cmd_synth(args, stage: Stage) -> dict:
    from .synthdata import generate_dataset, save_video
    cfg = load_config(args.config)
    sc = scenario_of(cfg)
    count = args.count if args.count is not None else int(cfg["dataset"]["count"])
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    videos = generate_dataset(sc, seed, count)
    for i, v in enumerate(videos):
        save_video(v, stage.path(f"video_{i:05d}.ctsv"))
    return manifest(args, "synth", cfg, {}, {"generate_seconds": time.perf_counter() - t0})


def cmd_train(args, stage: Stage) -> dict:
    from .pipeline import save_loss_curve, train
    from .synthdata import load_dataset
    cfg = load_config(args.config)
    tc = train_config_of(cfg, args.seed)
    videos = load_dataset(args.data)
    t0 = time.perf_counter()
    res = train(tc, videos, progress=lambda e, l: log.info("epoch %d loss %.4f", e + 1, l))
    res.save(stage.path("model.ckpt"))
    save_loss_curve(res.loss_curve, stage.path("loss.csv"))
    return manifest(args, "train", cfg, hash_path(Path(args.data)),
                    {"train_seconds": time.perf_counter() - t0, "skipped_videos": res.skipped_videos})


def cmd_infer(args, stage: Stage) -> dict:
    from .errors import ConfigError
    from .pipeline import ground_truth_result, load_model, run_inference, save_results
    from .synthdata import load_dataset
    videos = load_dataset(args.data)
    t0 = time.perf_counter()
    if args.ground_truth:
        save_results([ground_truth_result(v) for v in videos], stage.path("results_gt.json"),
                     {"source": "ground_truth"})
        return manifest(args, "infer", None, hash_path(Path(args.data)),
                        {"infer_seconds": time.perf_counter() - t0})
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint (or --ground-truth)")
    model, tc = load_model(args.checkpoint)
    cfg = load_config(args.config)
    values = parse_nf(args.nf_eval) or [cfg["infer"]["n_f_eval"] or tc.n_f_train]
    timings = {}
    for n_f in values:
        t1 = time.perf_counter()
        results = _map(lambda v: run_inference(model, tc, v, n_f), videos, args.threads)
        save_results(results, stage.path(f"results_nf{n_f}.json"), {"n_f_eval": n_f})
        timings[f"nf{n_f}_seconds"] = time.perf_counter() - t1
    timings["infer_seconds"] = time.perf_counter() - t0
    inputs = {**hash_path(Path(args.checkpoint)), **hash_path(Path(args.data))}
    return manifest(args, "infer", cfg, inputs, timings)


def cmd_eval(args, stage: Stage) -> dict:
    from .metrics import evaluate
    from .pipeline import load_results
    from .synthdata import load_dataset
    cfg = load_config(args.config)
    videos = load_dataset(args.data)
    t0 = time.perf_counter()
    out = {}
    for path in args.results:
        m = evaluate(load_results(path), videos, float(cfg["eval"]["iou_threshold"]))
        out[Path(path).name] = m.as_dict()
        print(f"{Path(path).name}: " + json.dumps(m.as_dict(), sort_keys=True))
    stage.path("metrics.json").write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    inputs = hash_path(Path(args.data))
    for path in args.results:
        inputs.update(hash_path(Path(path)))
    return manifest(args, "eval", cfg, inputs, {"eval_seconds": time.perf_counter() - t0})


def cmd_ablate(args, stage: Stage) -> dict:
    from .ablation import (AblationGrid, association_rows, clip_length_sweep, memory_rows,
                           reappearance_heavy, run_ablation, sweep_table)
    from .synthdata import generate_dataset
    cfg = load_config(args.config)
    sc = scenario_of(cfg)
    tc = train_config_of(cfg, None)
    ab = cfg["ablation"]
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    train_videos = generate_dataset(sc, seed, int(cfg["dataset"]["count"]))
    eval_videos = generate_dataset(reappearance_heavy(sc), seed + 1000, int(ab["eval_count"]))
    rows = association_rows(tc) + (memory_rows(tc) if ab["memory_modes"] else [])
    grid = AblationGrid(rows, [int(s) for s in ab["seeds"]])
    report = run_ablation(grid, train_videos, eval_videos,
                          progress=lambda r: log.info("%s seed %d: %s", r.row, r.seed, r.metrics))
    # clip-length sweep on a semi-online model
    from .pipeline import train
    sweep_cfg = dataclasses.replace(tc, n_f_train=int(ab["sweep_n_f_train"]), seed=seed)
    sweep_model = train(sweep_cfg, train_videos).model
    points = clip_length_sweep(sweep_model, sweep_cfg, eval_videos,
                               [int(x) for x in ab["sweep_n_f_eval"]])
    report.extra["clip_length_sweep"] = [
        {"n_f_eval": p.n_f_eval, "metrics": p.metrics.as_dict(),
         "seconds_per_frame": p.seconds_per_frame} for p in points]
    report.save(stage.path("ablation.json"))
    stage.path("ablation.txt").write_text(report.table() + "\n" + sweep_table(points))
    print(report.table())
    print(sweep_table(points))
    return manifest(args, "ablate", cfg, {}, {"ablate_seconds": time.perf_counter() - t0})


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    report = run_selfcheck(quick=args.quick)
    print(report.matrix(), end="")
    print("selfcheck:", "PASS" if report.passed else "FAIL " + ", ".join(report.failed()))
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cliptrack", description=__doc__.splitlines()[0])
    p.add_argument("--dump-defaults", action="store_true",
                   help="print the full default configuration as YAML and exit")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--count", type=int, help="number of videos (overrides dataset.count)")
    s = sub.add_parser("train", help="train a model on a dataset directory")
    common(s)
    s.add_argument("--data", required=True)
    s = sub.add_parser("infer", help="run inference, one results file per clip length")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--nf-eval", help='clip lengths, e.g. "3", "1,3,5" or "1-7"')
    s.add_argument("--ground-truth", action="store_true",
                   help="write the ground truth as a results file instead")
    s = sub.add_parser("eval", help="score results files against a dataset")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--results", required=True, nargs="+")
    s = sub.add_parser("ablate", help="run the ablation grid and clip-length sweep")
    common(s)
    s = sub.add_parser("selfcheck", help="run the oracle suites")
    s.add_argument("--quick", action="store_true", help="smaller case counts")
    return p


def _limit_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(max(1, n)))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads(args.threads)
    from .errors import ClipTrackError, ConfigError
    if args.dump_defaults:
        import yaml
        print(yaml.safe_dump(default_config(), sort_keys=False), end="")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if args.command == "selfcheck":
        return cmd_selfcheck(args)
    stage = Stage(args.out)
    try:
        m = COMMANDS[args.command](args, stage)
        stage.commit(m)
    except ConfigError as exc:
        stage.discard()
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ClipTrackError, OSError, ValueError) as exc:
        stage.discard()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BaseException:
        stage.discard()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

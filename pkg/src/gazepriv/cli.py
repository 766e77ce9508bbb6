"""Command-line front end: simulate, train, synthesize, extract, correlate, report, audit.

Exit codes: 0 success, 1 data or I/O error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import TASKS, __version__
from .core import load_ratings, load_recordings, position_to_velocity
from .diffusion import TrainingConfig, load_model, save_model, synthesize_window, train
from .embedding import encode, export_embeddings
from .errors import ConfigError, GazePrivError
from .events import segment, write_segmentations
from .features import CATALOG_VERSION, FeatureTable, extract_all
from .heatmap import emit_heatmap
from .metrics import (TargetSequence, fixation_samples, quality_report, rms_precision,
                      similarity_report, spatial_accuracy)
from .sim import SimConfig, decoupled_counterpart, simulate_cohort, write_corpus
from .stats import (SESSION_MODES, build_matrices, read_matrices_csv, significant_summary,
                    write_matrices_csv, write_summary_json)

log = logging.getLogger("gazepriv")
OUT_ENV = "GAZEPRIV_OUT"
DEFAULT_OUT = "gazepriv-out"
EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- plumbing

def config_hash(args: argparse.Namespace) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "log_level")}
    cfg["catalog_version"] = CATALOG_VERSION
    cfg["package_version"] = __version__
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path; rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class Run:
    """Per-invocation context: output root, provenance line and artifact list."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.seed = getattr(args, "seed", None)
        self.hash = config_hash(args)
        self.tag = f"gazepriv {__version__} command={args.command} seed={self.seed} config={self.hash}"
        self.artifacts = []

    def path(self, rel) -> Path:
        self.artifacts.append(str(rel))
        return self.out / rel

    def json(self, rel, payload: dict) -> None:
        payload = {"seed": self.seed, "config_hash": self.hash, **payload}
        with atomic_path(self.path(rel)) as tmp:
            with open(tmp, "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
                fh.write("\n")

    def manifest(self, extra: dict | None = None) -> None:
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "log_level", "out")}
        payload = {
            "command": self.args.command,
            "config": cfg,
            "versions": {"gazepriv": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version(), "feature_catalog": CATALOG_VERSION},
            "artifacts": sorted(self.artifacts),
        }
        payload.update(extra or {})
        self.json("run_manifest.json", payload)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_gaze(path, windows, comment):
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", "x_deg", "y_deg", "valid"])
        for win in windows:
            for t, x, y, v in zip(win.t, win.x, win.y, win.valid):
                w.writerow([int(t), f"{x:.6f}", f"{y:.6f}", int(v)])


def _tasks(arg) -> tuple:
    if not arg or arg == ["all"]:
        return TASKS
    bad = [t for t in arg if t not in TASKS]
    if bad:
        raise UsageError(f"unknown task(s) {bad}; choose from {TASKS} or 'all'")
    return tuple(t for t in TASKS if t in arg)


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _require_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise UsageError(f"{what} directory {path!r} does not exist")


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} file {path!r} does not exist")


def _rank_index(windows) -> list:
    """Renumber window_index as the order within each key, so corpora pair positionally."""
    seen = defaultdict(int)
    out = []
    for w in windows:
        out.append(replace(w, window_index=seen[w.key]))
        seen[w.key] += 1
    return out


def _segment_all(windows):
    return [segment(position_to_velocity(w), w) for w in windows]


def _load_targets(path) -> dict:
    targets = defaultdict(lambda: ([], []))
    if not Path(path).is_file():
        return {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        for r in rows:
            key = (r["subject_id"], int(r["session"]), int(r["round"]), r["task"], int(r["window_index"]))
            targets[key][0].append(int(r["t_ms"]))
            targets[key][1].append((float(r["x_deg"]), float(r["y_deg"])))
    return {k: TargetSequence(np.array(on), np.array(pos)) for k, (on, pos) in targets.items()}


# ---------------------------------------------------------------- stages

def _extract(run: Run, windows, prefix: str = "") -> FeatureTable:
    segs = _segment_all(windows)
    table = extract_all(segs)
    with atomic_path(run.path(f"{prefix}features.csv")) as tmp:
        table.to_csv(tmp, run.tag)
    with atomic_path(run.path(f"{prefix}events.csv")) as tmp:
        write_segmentations(tmp, segs, run.tag)
    return table


def _correlate(run: Run, table, reports, session_mode, prefix: str = "") -> list:
    matrices = build_matrices(table, reports, session_mode)
    with atomic_path(run.path(f"{prefix}matrices.csv")) as tmp:
        write_matrices_csv(tmp, matrices, run.tag)
    with atomic_path(run.path(f"{prefix}summary.json")) as tmp:
        write_summary_json(tmp, matrices, {"seed": run.seed, "config_hash": run.hash,
                                           "session_mode": session_mode, "alpha": 0.05, "correction": "none"})
    return matrices


def _heatmaps(run: Run, matrices, prefix: str = "") -> None:
    for m in matrices:
        rel = f"{prefix}heatmaps/{m.task}_{m.pooling}.svg"
        with atomic_path(run.path(rel)) as tmp:
            emit_heatmap(m, tmp, f"{prefix.rstrip('/') or 'gaze'} {m.task} / {m.pooling}", run.tag)


def _synthesize(model, windows, seed: int, variance: str):
    sched = TrainingConfig(variance=variance).schedule()
    return [synthesize_window(model, w, sched, int(seed) * 1_000_003 + i, variance)
            for i, w in enumerate(windows)]


def _write_synthetic_corpus(run: Run, windows, reports, rel_root: str) -> None:
    by_source = defaultdict(list)
    for w in windows:
        by_source[(w.key, w.source)].append(w)
    manifest = []
    for i, ((key, _), ws) in enumerate(sorted(by_source.items(), key=lambda kv: (kv[0][0], kv[0][1]))):
        name = f"gaze/{key.subject_id}_s{key.session}_r{key.round}_{key.task}_{i:04d}.csv"
        _write_gaze(run.path(f"{rel_root}/{name}"), ws, run.tag)
        manifest.append([name, *key])
    with atomic_path(run.path(f"{rel_root}/manifest.csv")) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(f"# {run.tag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "subject_id", "session", "round", "task"])
        w.writerows(manifest)
    with atomic_path(run.path(f"{rel_root}/ratings.csv")) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(f"# {run.tag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "session", "round", "task", "over_diff", "mentally", "tired_eyes"])
        for r in sorted(reports, key=lambda r: tuple(r.key)):
            w.writerow([r.subject_id, r.session, r.round, r.task, r.over_diff, r.mentally, r.tired_eyes])


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args, run: Run) -> dict:
    tasks = _tasks(args.task)
    cfg = SimConfig(task=tasks[0], rng_seed=args.seed)
    cohort = simulate_cohort(cfg, args.subjects, rounds=args.rounds, coupling=args.coupling,
                             sessions=args.sessions, tasks=tasks, seed=args.seed)
    staging = Path(tempfile.mkdtemp(prefix=".sim.", dir=_ensure(run.out)))
    try:
        counts = write_corpus(cohort, staging, run.tag)
        for f in sorted(staging.rglob("*.csv")):
            rel = f.relative_to(staging)
            dest = run.path(rel)
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(f, dest)
    finally:
        for d in sorted(staging.rglob("*"), reverse=True):
            d.rmdir() if d.is_dir() else d.unlink()
        staging.rmdir()
    return counts


def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args, run: Run) -> dict:
    _require_dir(args.data, "corpus")
    cfg = TrainingConfig.from_json(args.config) if args.config else TrainingConfig()
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
                 "lam": args.lam, "rng_seed": args.seed}
    cfg = TrainingConfig.from_dict({**cfg.to_dict(), **{("lambda" if k == "lam" else k): v
                                                          for k, v in overrides.items() if v is not None}})
    windows = load_recordings(args.data).windows
    result = train(windows, cfg)
    with atomic_path(run.path("model.gzdn")) as tmp:
        save_model(tmp, result.model)
    with atomic_path(run.path("loss.csv")) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(f"# {run.tag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(result.epoch_loss):
            w.writerow([i, repr(v)])
    return {"training_config": cfg.to_dict(), "windows": len(windows), "epoch_loss": result.epoch_loss}


def cmd_synthesize(args, run: Run) -> dict:
    _require_dir(args.data, "corpus")
    _require_file(args.model, "model")
    windows = load_recordings(args.data).windows
    model = load_model(args.model)
    synth = _synthesize(model, windows, args.seed, args.variance)
    ratings = Path(args.data) / "ratings.csv"
    reports = load_ratings(ratings) if ratings.is_file() else []
    _write_synthetic_corpus(run, synth, reports, ".")
    return {"windows": len(synth)}


def cmd_extract(args, run: Run) -> dict:
    _require_dir(args.data, "corpus")
    ingest = load_recordings(args.data)
    windows = [w for w in ingest.windows if w.task in _tasks(args.task)]
    table = _extract(run, windows)
    rows = [(w.subject_id, w.session, w.round, w.task, w.window_index, encode(position_to_velocity(w)))
            for w in windows]
    with atomic_path(run.path("embeddings.csv")) as tmp:
        export_embeddings(tmp, rows, run.tag)
    return {"ingest": ingest.report, "feature_rows": len(table)}


def cmd_correlate(args, run: Run) -> dict:
    _require_file(args.features, "feature table")
    _require_file(args.ratings, "ratings")
    table = FeatureTable.read_csv(args.features)
    reports = load_ratings(args.ratings)
    matrices = _correlate(run, table, reports, args.session_mode)
    return {"scopes": len(matrices), "empty_scopes": [f"{m.task}/{m.pooling}" for m in matrices if m.empty]}


def _quality(real, synth, targets) -> dict:
    acc, prec = defaultdict(list), defaultdict(list)
    for w, seg in zip(real, _segment_all(real)):
        fx = fixation_samples(w.positions, seg)
        if fx:
            prec[w.task].append((rms_precision(fx), sum(f.shape[1] for f in fx)))
        ts = targets.get((*w.key, w.window_index))
        if ts is not None:
            a = spatial_accuracy(w.positions, ts)
            if a is not None:
                acc[w.task].append(a)
    accuracy = {t: float(np.mean(v)) for t, v in acc.items()}
    precision = {}
    for t, pairs in prec.items():
        pairs = [(r, n) for r, n in pairs if r is not None]
        if pairs:
            precision[t] = float(sum(r * n for r, n in pairs) / sum(n for _, n in pairs))
    similarity = similarity_report(real, synth) if synth is not None else {}
    return quality_report(accuracy, precision, similarity)


def cmd_report(args, run: Run) -> dict:
    _require_dir(args.data, "corpus")
    real = _rank_index(load_recordings(args.data).windows)
    synth = None
    if args.synth:
        _require_dir(args.synth, "synthetic corpus")
        synth = _rank_index(load_recordings(args.synth).windows)
    targets = _load_targets(Path(args.data) / "targets.csv")
    run.json("quality.json", {"tasks": _quality(real, synth, targets)})
    if args.matrices:
        _require_file(args.matrices, "matrix CSV")
        _heatmaps(run, read_matrices_csv(args.matrices))
    return {}


def _compare(real_m, synth_m) -> dict:
    out = {}
    for a, b in zip(real_m, synth_m):
        ra, rb = np.abs(a.rho), np.abs(b.rho)
        out[f"{a.task}/{a.pooling}"] = {
            "real_significant": int(a.significant.sum()),
            "synthetic_significant": int(b.significant.sum()),
            "real_median_abs_rho": _nanmedian(ra),
            "synthetic_median_abs_rho": _nanmedian(rb),
            "sac_rate": {rating: {"real": _num(a.cell("Sac_Rate", rating).rho),
                                  "synthetic": _num(b.cell("Sac_Rate", rating).rho)}
                         for rating in a.ratings},
        }
    return out


def _num(x):
    return None if not np.isfinite(x) else round(float(x), 12)


def _nanmedian(a):
    a = a[np.isfinite(a)]
    return round(float(np.median(a)), 12) if a.size else None


def cmd_audit(args, run: Run) -> dict:
    tasks = _tasks(args.task)
    if args.simulate:
        if args.synthesizer != "decoupled" and args.model is None:
            raise UsageError("--synthesizer diffusion needs --model")
        cfg = SimConfig(task=tasks[0], rng_seed=args.seed)
        cohort = simulate_cohort(cfg, args.subjects, rounds=args.rounds, coupling=args.coupling,
                                 sessions=args.sessions, tasks=tasks, seed=args.seed)
        real, reports = cohort.windows, cohort.reports
        if args.synthesizer == "decoupled":
            synth = decoupled_counterpart(cohort).windows
    else:
        _require_dir(args.data, "corpus")
        if args.synthesizer == "decoupled":
            raise UsageError("the decoupled synthesizer needs simulator latents; use --simulate or --model")
        real = [w for w in load_recordings(args.data).windows if w.task in tasks]
        reports = load_ratings(Path(args.data) / "ratings.csv")
    if args.synthesizer == "diffusion":
        _require_file(args.model, "model")
        synth = _synthesize(load_model(args.model), real, args.seed, args.variance)
    real_m = _correlate(run, _extract(run, real, "real/"), reports, args.session_mode, "real/")
    synth_m = _correlate(run, _extract(run, synth, "synthetic/"), reports, args.session_mode, "synthetic/")
    _heatmaps(run, real_m, "real/")
    _heatmaps(run, synth_m, "synthetic/")
    run.json("comparison.json", {"scopes": _compare(real_m, synth_m),
                                 "real": significant_summary(real_m),
                                 "synthetic": significant_summary(synth_m)})
    return {"windows": len(real), "scopes": [f"{m.task}/{m.pooling}" for m in real_m]}


# ---------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                   help=f"output directory (default: ${OUT_ENV} or {DEFAULT_OUT})")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _cohort_args(p):
    p.add_argument("--task", nargs="+", default=["all"], help="HSS, RAN, TEX or all")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--rounds", type=_ints, default=(2, 3, 4), help="comma-separated rounds")
    p.add_argument("--sessions", type=_ints, default=(1,), help="comma-separated sessions")
    p.add_argument("--coupling", type=float, default=1.0, help="state coupling gain g in [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazepriv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gazepriv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="write an oracle-simulator corpus")
    _cohort_args(p)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the reference denoiser on a corpus")
    p.add_argument("--data", required=True, help="corpus directory with manifest.csv")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="sample synthetic windows conditioned on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--variance", choices=["beta", "beta_tilde"], default="beta_tilde")
    _common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("extract", help="segment events and compute the feature table")
    p.add_argument("--data", required=True)
    p.add_argument("--task", nargs="+", default=["all"])
    _common(p, seed=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("correlate", help="Spearman matrices of features against ratings")
    p.add_argument("--features", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--session-mode", choices=SESSION_MODES, default="sessions")
    _common(p, seed=False)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="quality metrics and heatmaps")
    p.add_argument("--data", required=True, help="real corpus")
    p.add_argument("--synth", help="paired synthetic corpus")
    p.add_argument("--matrices", help="matrix CSV to render as heatmaps")
    _common(p, seed=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="real vs. synthetic correlation comparison, end to end")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--simulate", action="store_true", help="generate the real corpus with the simulator")
    src.add_argument("--data", help="real corpus directory")
    p.add_argument("--synthesizer", choices=["decoupled", "diffusion"], default="decoupled")
    p.add_argument("--model", help="denoiser parameters for --synthesizer diffusion")
    p.add_argument("--variance", choices=["beta", "beta_tilde"], default="beta_tilde")
    p.add_argument("--session-mode", choices=SESSION_MODES, default="sessions")
    _cohort_args(p)
    _common(p)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        run = Run(args)
        extra = args.func(args, run) or {}
        run.manifest({"result": extra})
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gazepriv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"gazepriv: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GazePrivError as exc:
        print(f"gazepriv: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"gazepriv: io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver.

Subcommands: ``run`` (inference over an episode set), ``eval`` (score
prediction directories), ``synth`` (materialize synthetic episodes), and
``gradcheck`` (finite-difference gate over every loss gradient).

Exit codes: 0 success, 1 configuration/usage error, 2 partial episode
failures, 3 gradient check above tolerance.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from .episodes import (
    Episode,
    SyntheticSpec,
    generate_synthetic,
    load_episode,
    load_manifest,
    sample_episode,
    save_episode,
)
from .errors import ConfigError, FewvosError
from .gradcheck import DEFAULT_SIZE, InstanceSize, TOLERANCE, run_gradient_checks
from .metrics import compute_report
from .optimizer import MODES, TTIConfig, run_episode
from .tensorio import read_tensor, write_tensor

DEFAULT_WINDOWS = (3, 5, 7, 9, 11)


@dataclass
class RunConfig:
    """Resolved configuration of one `run` invocation."""

    input_kind: str  # synthetic | manifest | episodes
    out: Path
    mode: str = "tti"
    seed: int = 0
    runs: int = 1
    episodes: int = 1
    workers: int = 1
    metrics: list[str] = field(default_factory=lambda: ["miou", "vc", "bf"])
    windows: list[int] = field(default_factory=lambda: list(DEFAULT_WINDOWS))
    inference: TTIConfig = field(default_factory=TTIConfig)
    synthetic_spec: dict | None = None
    manifest_path: Path | None = None
    episodes_path: Path | None = None
    fold: str | None = None
    class_ids: list[int] | None = None
    shots: int = 5
    frames: int = 8

    def validate(self) -> None:
        try:
            self.inference.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(w < 2 for w in self.windows):
            raise ConfigError("every consistency window must be >= 2")
        if self.episodes < 0 or self.runs < 1 or self.workers < 1:
            raise ConfigError("episodes must be >= 0; runs and workers >= 1")
        if self.input_kind not in ("synthetic", "manifest", "episodes"):
            raise ConfigError(f"unknown input kind {self.input_kind!r}")


def _load_run_config(path: Path, args) -> RunConfig:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    inference = TTIConfig(**doc.get("inference", {}))
    source = doc.get("input", {})
    kind = source.get("kind", "synthetic")
    cfg = RunConfig(
        input_kind=kind,
        out=Path(args.out or doc.get("out", "runs/out")),
        mode=args.mode or doc.get("mode", "tti"),
        seed=args.seed if args.seed is not None else int(doc.get("seed", 0)),
        runs=int(doc.get("runs", 1)),
        episodes=int(doc.get("episodes", 1)),
        workers=args.workers or int(doc.get("workers", 1)),
        metrics=list(doc.get("metrics", ["miou", "vc", "bf"])),
        windows=[int(w) for w in doc.get("windows", DEFAULT_WINDOWS)],
        inference=inference,
        synthetic_spec=source.get("spec"),
        manifest_path=Path(source["path"]) if kind == "manifest" else None,
        episodes_path=Path(source["path"]) if kind == "episodes" else None,
        fold=source.get("fold"),
        class_ids=source.get("classes"),
        shots=int(source.get("shots", 5)),
        frames=int(source.get("frames", 8)),
    )
    cfg.inference.mode = cfg.mode
    cfg.validate()
    return cfg


def _iter_episodes(cfg: RunConfig):
    """Yield (run_index, Episode) deterministically from the configured source."""
    if cfg.input_kind == "synthetic":
        if cfg.synthetic_spec is None:
            raise ConfigError("synthetic input requires an inline spec")
        base = dict(cfg.synthetic_spec)
        for r in range(cfg.runs):
            for i in range(cfg.episodes):
                spec = SyntheticSpec.from_dict(
                    {**base, "seed": int(np.random.default_rng(
                        [cfg.seed, r, i]).integers(2**31))}
                )
                episode = generate_synthetic(spec)
                episode.episode_id = f"run{r}-ep{i:04d}"
                yield r, episode
    elif cfg.input_kind == "manifest":
        manifest = load_manifest(cfg.manifest_path)
        if cfg.fold is None:
            raise ConfigError("manifest input requires a fold name")
        classes = cfg.class_ids or manifest.folds[cfg.fold].test
        if not classes:
            raise ConfigError(f"fold {cfg.fold!r} has no test classes")
        for r in range(cfg.runs):
            for i in range(cfg.episodes):
                rng = np.random.default_rng([cfg.seed, r, i])
                class_id = int(classes[int(rng.integers(len(classes)))])
                episode = sample_episode(
                    manifest, cfg.fold, class_id, cfg.shots, cfg.frames,
                    seed=int(rng.integers(2**31)),
                )
                episode.episode_id = f"run{r}-ep{i:04d}-{episode.episode_id}"
                yield r, episode
    else:
        root = cfg.episodes_path
        if root is None or not root.exists():
            raise ConfigError(f"episode directory {root} does not exist")
        dirs = sorted(d for d in root.iterdir() if (d / "meta.json").exists())
        for d in dirs:
            yield 0, load_episode(d)


def _run_one(payload):
    run_index, episode, cfg = payload
    masks, trace = run_episode(episode, cfg.inference)
    record = {"episode": episode.episode_id, "run": run_index}
    if episode.gt is not None:
        report = compute_report(
            masks, episode.gt,
            windows=[w for w in cfg.windows if w <= episode.n_frames],
            metrics=cfg.metrics,
        )
        if report.miou is not None:
            record["miou"] = report.miou
        for w, value in sorted(report.vc.items()):
            record[f"vc{w}"] = value
        if report.boundary_f is not None:
            record["boundary_f"] = report.boundary_f
    summary = {
        "episode": episode.episode_id,
        "run": run_index,
        "iterations": len(trace.records),
        "keyframe": trace.keyframe,
        "refinement_skipped": trace.refinement_skipped,
        "final_total": trace.records[-1].total if trace.records else None,
        "final_ce": trace.records[-1].ce if trace.records else None,
    }
    return episode.episode_id, masks, episode.gt, record, summary


def cmd_run(args) -> int:
    try:
        cfg = _load_run_config(Path(args.config), args)
        jobs = [(r, ep, cfg) for r, ep in _iter_episodes(cfg)]
    except (ConfigError, FewvosError, OSError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = cfg.out
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    results, summaries = [], []
    failures = 0
    if cfg.workers > 1:
        with Pool(cfg.workers) as pool:
            outcomes = pool.map(_run_one_safe, jobs, chunksize=1)
    else:
        outcomes = [_run_one_safe(job) for job in jobs]
    for outcome in outcomes:
        if isinstance(outcome, tuple) and outcome[0] == "__error__":
            print(f"episode {outcome[1]} failed: {outcome[2]}", file=sys.stderr)
            failures += 1
            continue
        episode_id, masks, gt, record, summary = outcome
        write_tensor(masks.astype(np.float64), out / "predictions" / f"{episode_id}.fts")
        if gt is not None:
            write_tensor(gt.astype(np.float64), out / "gt" / f"{episode_id}.fts")
        results.append(record)
        summaries.append(summary)
    results.sort(key=lambda r: (r["run"], r["episode"]))
    summaries.sort(key=lambda r: (r["run"], r["episode"]))
    _write_jsonl(out / "results.jsonl", results)
    _write_jsonl(out / "trace_summary.jsonl", summaries)
    return 2 if failures else 0


def _run_one_safe(payload):
    try:
        return _run_one(payload)
    except (FewvosError, ValueError) as exc:
        return ("__error__", payload[1].episode_id, str(exc))


def _write_jsonl(path: Path, records: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if not pred_dir.is_dir():
        print(f"prediction directory {pred_dir} does not exist", file=sys.stderr)
        return 1
    windows = [int(w) for w in args.windows.split(",")] if args.windows else list(
        DEFAULT_WINDOWS
    )
    if any(w < 2 for w in windows):
        print("every consistency window must be >= 2", file=sys.stderr)
        return 1
    metrics = args.metrics.split(",") if args.metrics else ["miou", "vc", "bf"]
    per_run: dict[str, list[dict]] = {}
    flagged = 0
    for pred_path in sorted(pred_dir.glob("*.fts")):
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            print(f"missing ground truth for {pred_path.name}", file=sys.stderr)
            flagged += 1
            continue
        try:
            pred = np.rint(read_tensor(pred_path)).astype(np.uint8)
            gt = np.rint(read_tensor(gt_path)).astype(np.uint8)
            if pred.shape != gt.shape:
                raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
            report = compute_report(
                pred, gt, windows=[w for w in windows if w <= len(gt)],
                metrics=metrics,
            )
        except (FewvosError, ValueError) as exc:
            print(f"episode {pred_path.name} failed: {exc}", file=sys.stderr)
            flagged += 1
            continue
        run = pred_path.name.split("-")[0] if pred_path.name.startswith("run") else "run0"
        row = {}
        if report.miou is not None:
            row["miou"] = report.miou
        for w, value in report.vc.items():
            if value is not None:
                row[f"vc{w}"] = value
        if report.boundary_f is not None:
            row["bf"] = report.boundary_f
        per_run.setdefault(run, []).append(row)
    if not per_run:
        print("no episodes scored", file=sys.stderr)
        return 2 if flagged else 1
    columns = sorted({key for rows in per_run.values() for row in rows for key in row})
    run_means = {
        run: {
            c: float(np.mean([row[c] for row in rows if c in row]))
            for c in columns if any(c in row for row in rows)
        }
        for run, rows in per_run.items()
    }
    print("metric " + " ".join(f"{c:>12}" for c in columns))
    means = {
        c: float(np.mean([m[c] for m in run_means.values() if c in m]))
        for c in columns
    }
    spreads = {
        c: (float(np.std([m[c] for m in run_means.values() if c in m]))
            if len(run_means) > 1 else 0.0)
        for c in columns
    }
    print("mean   " + " ".join(f"{means[c]:12.4f}" for c in columns))
    print("spread " + " ".join(f"{spreads[c]:12.4f}" for c in columns))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        curve_lines = ["window\tmean\tspread"]
        for w in windows:
            key = f"vc{w}"
            if key in means:
                curve_lines.append(f"{w}\t{means[key]!r}\t{spreads[key]!r}")
        (out / "vc_curve.tsv").write_text("\n".join(curve_lines) + "\n")
        (out / "eval_summary.json").write_text(
            json.dumps({"mean": means, "spread": spreads}, sort_keys=True,
                       default=float) + "\n"
        )
    return 2 if flagged else 0


def cmd_synth(args) -> int:
    try:
        spec_doc = json.loads(Path(args.spec).read_text())
        SyntheticSpec.from_dict(spec_doc)  # validate early
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"bad synthetic spec: {exc}", file=sys.stderr)
        return 1
    if args.count < 0:
        print("count must be non-negative", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        index = []
        for i in range(args.count):
            seed = int(np.random.default_rng([args.seed, i]).integers(2**31))
            episode = generate_synthetic(
                SyntheticSpec.from_dict({**spec_doc, "seed": seed})
            )
            episode.episode_id = f"ep{i:04d}"
            save_episode(episode, out / episode.episode_id)
            index.append(episode.episode_id)
        (out / "episodes.json").write_text(
            json.dumps({"episodes": index, "spec": spec_doc, "seed": args.seed},
                       sort_keys=True) + "\n"
        )
    except OSError as exc:
        print(f"cannot write to {out}: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        print("instances must be >= 1", file=sys.stderr)
        return 1
    try:
        size = InstanceSize(*(int(x) for x in args.size.split(",")))
    except (TypeError, ValueError):
        print(f"bad --size {args.size!r}; expected C,H,W,frames,shots",
              file=sys.stderr)
        return 1
    results = run_gradient_checks(seed=args.seed, instances=args.instances,
                                  size=size)
    failed = False
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.loss:>12}  max rel err {result.max_rel_error:.3e}  {status}")
        if not result.passed:
            failed = True
            print(
                f"    worst coordinate {result.worst_coordinate}"
                f" on instance {result.worst_instance}",
                file=sys.stderr,
            )
    print(f"tolerance {TOLERANCE:g}")
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewvos",
        description="Few-shot video object segmentation over exported features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run inference over an episode set")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--out", help="output directory (overrides config)")
    p_run.add_argument("--mode", choices=MODES, help="override inference mode")
    p_run.add_argument("--seed", type=int, help="override base seed")
    p_run.add_argument("--workers", type=int, help="worker pool size")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score a prediction directory")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--metrics", default="miou,vc,bf")
    p_eval.add_argument("--windows", default=",".join(str(w) for w in DEFAULT_WINDOWS))
    p_eval.add_argument("--out", help="directory for plot-ready columns")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="materialize synthetic episodes")
    p_synth.add_argument("--spec", required=True, help="JSON synthetic spec")
    p_synth.add_argument("--count", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=20)
    p_grad.add_argument("--size", default=",".join(str(x) for x in DEFAULT_SIZE))
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

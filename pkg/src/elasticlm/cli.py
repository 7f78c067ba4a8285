"""Command-line entry point: ``elasticlm <subcommand> [options]``.

Configuration comes from an optional JSON file (``--config``) with
``--set key.sub=value`` overrides; flags of each subcommand win over both.
Every subcommand writes ``resolved_config.<command>.json`` and ``VERSION``
into its ``--out`` directory.

Exit codes: 0 success, 1 usage, 2 contract or invariant failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import pipeline as P
from . import pruning
from . import simulator as S
from .distill import TrainingTrace
from .errors import CheckpointError, ConfigError, ElasticError
from .scheduler import ElasticScheduler, LatencyProfile, StaticScheduler, calibrate

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration entry, e.g. distill.steps_per_epoch=50")
    p.add_argument("--seed", type=int, help="global seed (overrides the configuration)")
    p.add_argument("--out", type=Path, required=out_required, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elasticlm", description="Elastic encoder training and serving simulation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("pretrain-teacher", help="MLM-pretrain the full teacher")
    _common(p)
    p.add_argument("--corpus", type=Path, help="byte corpus; generated and cached here if absent")

    p = sub.add_parser("score", help="expressive scores and submap, written into the checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path)

    p = sub.add_parser("distill", help="compact and distill the elastic student")
    _common(p)
    p.add_argument("--teacher", type=Path, required=True, help="scored teacher checkpoint")
    p.add_argument("--corpus", type=Path)

    p = sub.add_parser("finetune", help="elastic finetuning on a synthetic task")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--objective", choices=["classification", "dense", "rerank"], required=True)
    p.add_argument("--retriever", type=Path, help="dense checkpoint used to mine rerank negatives")

    p = sub.add_parser("eval-retrieval", help="recall / MRR per query level")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, help="passage index; built from the checkpoint if absent")
    p.add_argument("--reranker", type=Path, help="also run the retriever x reranker level grid")

    p = sub.add_parser("calibrate", help="per-level latency profile")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--metrics", type=Path, help="metrics.json providing performance proxies")
    p.add_argument("--trials", type=int)
    p.add_argument("--input-length", type=int)

    p = sub.add_parser("simulate", help="serve a ramped workload under elastic and static schedules")
    _common(p)
    p.add_argument("--mode", choices=["de", "wall"], default="de")
    p.add_argument("--profile", type=Path, help="latency profile CSV; a synthetic table if absent")
    p.add_argument("--constraint-ms", type=float, action="append", help="latency constraint T (repeatable)")
    p.add_argument("--level", type=float, action="append",
                   help="static baseline level (repeatable); default largest and smallest")
    p.add_argument("--spec", type=Path, help="workload spec JSON")
    p.add_argument("--checkpoint", type=Path, help="model served in wall mode")
    p.add_argument("--time-scale", type=float, default=1.0, help="wall mode: compress client pauses")
    p.add_argument("--bucket-s", type=float, default=5.0)
    p.add_argument("--no-count-in-service", action="store_true",
                   help="queue size excludes the request being dispatched")

    p = sub.add_parser("report", help="summarize the event traces of a simulate run")
    p.add_argument("--run", type=Path, required=True, help="simulate run directory")
    p.add_argument("--out", type=Path, help="write summary.csv here (default: the run directory)")
    return parser


def _config(args) -> P.RunConfig:
    config = P.RunConfig.load(args.config, args.set)
    if args.seed is not None:
        config = config.with_overrides([f"seed={args.seed}", f"workload.seed={args.seed}"])
    return config


def _existing(path: Path | None, what: str) -> Path | None:
    if path is not None and not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _corpus(config, args, out: Path):
    path = args.corpus if args.corpus is not None else out / "corpus.txt"
    return P.load_corpus(config, path)


def _trace(out: Path, name: str) -> TrainingTrace:
    sink = open(out / f"{name}.jsonl", "w")
    return TrainingTrace(sink=sink)


def _close(trace: TrainingTrace) -> None:
    if trace.sink is not None:
        trace.sink.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(args, config, out: Path) -> None:
    corpus = _corpus(config, args, out)
    trace = _trace(out, "pretrain_trace")
    try:
        teacher, trace = P.train_teacher(config, corpus, trace)
    finally:
        _close(trace)
    ckpt.save_model(out / "teacher.ckpt", teacher, extras={"stage": "teacher"})
    _write_json(out / "pretrain_notes.json", trace.notes)
    print(f"teacher: held-out MLM {trace.notes['heldout_before']:.4f} -> {trace.notes['heldout_after']:.4f}")


def cmd_score(args, config, out: Path) -> None:
    teacher, extras = ckpt.load_model(_existing(args.checkpoint, "checkpoint"))
    corpus = _corpus(config, args, out)
    scores, submap, report = P.score_teacher(teacher, corpus, config)
    extras.update(scores=scores.to_dict(), score_notes=report)
    ckpt.save_model(args.checkpoint, teacher.with_submap(submap), extras)
    (out / "scores.txt").write_text(pruning.format_sidecar(scores))
    for s in submap:
        print(f"level {s.level:g}: heads/layer {[len(h) for h in s.heads]}, neurons/layer {[len(n) for n in s.neurons]}")


def cmd_distill(args, config, out: Path) -> None:
    teacher, extras = ckpt.load_model(_existing(args.teacher, "teacher checkpoint"), config.model)
    if "scores" not in extras:
        raise ConfigError("teacher checkpoint carries no submap; run `score` first")
    corpus = _corpus(config, args, out)
    trace = _trace(out, "distill_trace")
    try:
        student, trace = P.distill_student(teacher, teacher.submap, corpus, config, trace)
    finally:
        _close(trace)
    ckpt.save_model(out / "student.ckpt", student, extras={"stage": "student", "distill_notes": trace.notes})
    _write_json(out / "distill_notes.json", {str(k): v for k, v in trace.notes.items()})
    before, after = trace.notes["heldout_before"], trace.notes["heldout_after"]
    for level in student.submap.levels:
        print(f"level {level:g}: held-out align {before[level]:.3e} -> {after[level]:.3e}")


def cmd_finetune(args, config, out: Path) -> None:
    student, extras = ckpt.load_model(_existing(args.checkpoint, "checkpoint"))
    retriever = None
    if args.retriever is not None:
        retriever, _ = ckpt.load_model(_existing(args.retriever, "retriever checkpoint"))
    trace = _trace(out, f"finetune_{args.objective}_trace")
    try:
        tuned, trace = P.finetune_student(student, args.objective, config, retriever, trace)
    finally:
        _close(trace)
    ckpt.save_model(out / f"{args.objective}.ckpt", tuned, extras={"stage": args.objective})
    if args.objective == "dense":
        index, metrics = P.eval_retrieval(tuned, config)
        ckpt.save_index(out / "index.bin", index)
        _write_json(out / "metrics.json", _metrics_json(metrics))
        _print_metrics(metrics)


def _metrics_json(metrics: dict) -> dict:
    return {repr(level): m for level, m in metrics.items()}


def _num(text: str):
    value = float(text)
    return int(value) if value.is_integer() else value


def _print_metrics(metrics: dict) -> None:
    for level, m in metrics.items():
        print(f"level {level:g}: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(m.items())))


def cmd_eval(args, config, out: Path) -> None:
    model, _ = ckpt.load_model(_existing(args.checkpoint, "checkpoint"))
    index = ckpt.load_index(args.index) if _existing(args.index, "index") is not None else None
    index, metrics = P.eval_retrieval(model, config, index)
    if args.index is None:
        ckpt.save_index(out / "index.bin", index)
    _write_json(out / "metrics.json", _metrics_json(metrics))
    _print_metrics(metrics)
    if args.reranker is not None:
        reranker, _ = ckpt.load_model(_existing(args.reranker, "reranker checkpoint"))
        table = P.grid(model, reranker, config, index)
        rows = [{"retriever_level": rl, "reranker_level": kl, "mrr": v} for (rl, kl), v in table.items()]
        (out / "grid.csv").write_text(S.table_to_csv(rows))
        print(f"grid: {len(rows)} combinations written to {out / 'grid.csv'}")


def cmd_calibrate(args, config, out: Path) -> None:
    model, _ = ckpt.load_model(_existing(args.checkpoint, "checkpoint"))
    proxies = None
    if _existing(args.metrics, "metrics") is not None:
        metrics = {_num(k): v for k, v in json.loads(args.metrics.read_text()).items()}
        proxies = P.proxies_from_metrics(metrics, config.retrieval.proxy_metric)
    profile = calibrate(model, model.submap, trials=args.trials or config.calibration_trials,
                        input_length=args.input_length or config.calibration_length,
                        proxies=proxies, seed=config.seed)
    profile.save(out / "profile.csv")
    for v in profile.violations:
        print(f"warning: {v}", file=sys.stderr)
    print(profile.to_csv(), end="")


def cmd_simulate(args, config, out: Path) -> None:
    spec = S.WorkloadSpec.load(_existing(args.spec, "workload spec")) if args.spec else config.workload
    if args.seed is not None:
        spec = S.WorkloadSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    if args.profile is not None:
        profile = LatencyProfile.load(_existing(args.profile, "profile"))
    else:
        profile = LatencyProfile.from_table(P.SYNTHETIC_LATENCY_MS, P.SYNTHETIC_PROXY)
    constraints = args.constraint_ms or list(config.constraints_ms)
    statics = args.level or [profile.levels[0], profile.levels[-1]]
    for lv in statics:
        profile[_num(repr(lv))]
    statics = [_num(repr(lv)) for lv in statics]
    _write_json(out / "workload.json", spec.to_dict())
    profile.save(out / "profile.csv")

    model = None
    if args.mode == "wall":
        if args.checkpoint is None:
            raise ConfigError("--mode wall needs --checkpoint")
        model, _ = ckpt.load_model(_existing(args.checkpoint, "checkpoint"))
        queries = [q for q, _ in P.retrieval_eval_set(config)[1]]
    arrivals = S.generate_workload(spec)
    count = not args.no_count_in_service

    def run(scheduler):
        if args.mode == "de":
            return S.run_discrete_event(arrivals, scheduler, profile, count_in_service=count)
        return S.run_wall_clock(model, scheduler, spec, queries, profile, count_in_service=count,
                                time_scale=args.time_scale)

    summary = []
    for T in constraints:
        runs = {}
        configs = [ElasticScheduler(profile, T)] + [StaticScheduler(profile, lv, T) for lv in statics]
        for sched in configs:
            events = run(sched)
            label = f"{sched.label}_T{T:g}"
            runs[label] = events
            (out / f"events_{label}.csv").write_text(S.events_to_csv(events))
            (out / f"buckets_{label}.csv").write_text(S.report(events, spec, T, args.bucket_s, label).to_csv())
        windows = {"first10s": (0.0, 10.0), "peak": (spec.ramp_s, spec.duration_s)}
        for row in S.compare(runs, spec, T, windows):
            summary.append({"T_ms": T, **row})
    (out / "summary.csv").write_text(S.table_to_csv(summary))
    _print_summary(summary)


def _print_summary(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    print("  ".join(f"{c:>22}" for c in cols))
    for r in rows:
        print("  ".join(f"{v:>22.4f}" if isinstance(v, float) else f"{str(v):>22}" for v in r.values()))


def cmd_report(args) -> None:
    run = _existing(args.run, "run directory")
    spec = S.WorkloadSpec.load(run / "workload.json")
    profile = LatencyProfile.load(run / "profile.csv")
    rows = []
    for path in sorted(run.glob("events_*.csv")):
        label = path.stem[len("events_"):]
        events = _read_events(path.read_text(), profile)
        T = float(label.rsplit("_T", 1)[1])
        stats = S.window_stats(events, T)
        peak = S.window_stats(events, T, spec.ramp_s, spec.duration_s)
        rows.append({"config": label, "requests": stats["requests"],
                     "violation_rate": stats["violation_rate"], "peak_violation_rate": peak["violation_rate"],
                     "mean_latency_ms": stats["mean_latency_ms"], "mean_perf_proxy": stats["mean_perf_proxy"]})
    if not rows:
        raise FileNotFoundError(f"no event traces in {run}")
    out = args.out or run
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(S.table_to_csv(rows))
    _print_summary(rows)


def _read_events(text: str, profile: LatencyProfile) -> list[S.RequestEvent]:
    import csv
    import io

    events = []
    for r in csv.DictReader(io.StringIO(text)):
        events.append(S.RequestEvent(int(r["request_id"]), int(r["client_id"]), float(r["arrival"]),
                                     float(r["dequeue"]), float(r["completion"]), _num(r["level"]),
                                     int(r["queue_size"]), int(r["ahead_at_arrival"]), float(r["proxy"])))
    return events


COMMANDS = {
    "pretrain-teacher": cmd_pretrain,
    "score": cmd_score,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval-retrieval": cmd_eval,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "report":
            cmd_report(args)
            return EXIT_OK
        config = _config(args)
        out = P.prepare_run_dir(args.out, config, args.command)
        COMMANDS[args.command](args, config, out)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        _fail("io", exc)
        return EXIT_IO
    except (ElasticError, json.JSONDecodeError) as exc:
        _fail("contract", exc)
        return EXIT_CONTRACT
    return EXIT_OK


def _fail(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

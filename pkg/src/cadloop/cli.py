"""Command-line front end.

Subcommands: generate, refine, evaluate, hitl, and the bench group
(run / report / stratify). Everything is wired from a key-value config file
(see README); flags override the config.
"""

from __future__ import annotations

import argparse
import csv
import json
import shlex
import sys
from pathlib import Path

from . import bench as bench_mod
from .config import get_float, get_int, get_str, load_config
from .executor import ExecutorClient
from .gateway import FewShotLibrary, gateway_from_config
from .mesh import parse_stl
from .metrics import evaluate_pair
from .pipeline import MECHANISMS, Pipeline, PipelineSettings


def _load_cfg(args):
    return load_config(args.config) if args.config else {}


def _settings_from(cfg, args):
    mode = getattr(args, "mode", None) or get_str(cfg, "pipeline.mode", "zero_shot")
    return PipelineSettings(
        repair_budget=getattr(args, "repair_budget", None)
        or get_int(cfg, "pipeline.repair_budget", 3),
        refinement_budget=getattr(args, "refinements", None)
        or get_int(cfg, "pipeline.refinement_budget", 2),
        mode=mode,
        few_shot_k=get_int(cfg, "pipeline.few_shot_k", 5),
        n_points=get_int(cfg, "pipeline.n_points", 1000),
        seed=getattr(args, "seed", None) if getattr(args, "seed", None) is not None
        else get_int(cfg, "pipeline.seed", 0),
        view_resolution=get_int(cfg, "pipeline.view_resolution", 512),
        timeout_s=get_float(cfg, "pipeline.timeout_s", 60.0),
        attach_images=get_str(cfg, "pipeline.attach_images", "true").lower() != "false",
    )


def _library_from(cfg, args):
    path = getattr(args, "library", None) or cfg.get("few_shot_library", "")
    return FewShotLibrary.load(path) if path else None


def _executor_from(cfg, artifacts_root=None):
    cmd_text = get_str(cfg, "runner.cmd",
                       f"{sys.executable} -m cadloop.testing.stub_runner")
    return ExecutorClient(
        shlex.split(cmd_text),
        mode=get_str(cfg, "runner.mode", "persistent"),
        pool_size=get_int(cfg, "runner.pool_size", 1),
        artifacts_root=artifacts_root,
    )


def _pipeline_from(cfg, args, artifacts):
    gateway = gateway_from_config(cfg, transcript_path=Path(artifacts) / "transcript.jsonl")
    executor = _executor_from(cfg)
    settings = _settings_from(cfg, args)
    library = _library_from(cfg, args)
    return Pipeline(gateway, executor, settings=settings, library=library,
                    artifact_root=artifacts)


def _print_trace_summary(trace, out=None):
    out = out if out is not None else sys.stdout
    out.write(f"episode {trace.episode_id}\n")
    for record in trace.stages:
        m = record.metrics
        status = record.status or ("carried" if record.carried_from else "n/a")
        out.write(f"  {record.stage:<12} status={status:<14} compiled={m.compiled!s:<5} "
                  f"iogt={m.iogt:.4f} pcd={m.pcd:.4f} hd={m.hausdorff:.4f}\n")
    if trace.best_refine:
        b = trace.best_refine
        out.write(f"  {'best_refine':<12} {'':<21} compiled={b.compiled!s:<5} "
                  f"iogt={b.iogt:.4f} pcd={b.pcd:.4f} hd={b.hausdorff:.4f}\n")


# -- subcommand handlers -----------------------------------------------------------


def cmd_generate(args):
    cfg = _load_cfg(args)
    artifacts = Path(args.artifacts)
    pipeline = _pipeline_from(cfg, args, artifacts)
    description = args.description or Path(args.description_file).read_text(encoding="utf-8")
    script = pipeline.generate_code(description.strip(), episode_id=args.episode_id)
    if args.out:
        Path(args.out).write_text(script.code + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(script.code)
    return 0


def _run_single_episode(args, mechanism):
    cfg = _load_cfg(args)
    artifacts = Path(args.artifacts)
    pipeline = _pipeline_from(cfg, args, artifacts)
    entries = bench_mod.load_dataset(args.dataset)
    wanted = {e.id: e for e in entries}
    if args.id not in wanted:
        print(f"no entry '{args.id}' in {args.dataset}", file=sys.stderr)
        return 2
    trace = pipeline.run_episode(wanted[args.id], mechanism=mechanism)
    _print_trace_summary(trace)
    return 0


def cmd_refine(args):
    return _run_single_episode(args, args.mechanism)


def cmd_hitl(args):
    return _run_single_episode(args, "hitl")


def cmd_evaluate(args):
    generated = parse_stl(Path(args.generated).read_bytes(), source_name="generated")
    ground_truth = parse_stl(Path(args.ground_truth).read_bytes(), source_name="ground_truth")
    record = evaluate_pair(generated, ground_truth, n=args.points, seed=args.seed)
    if args.json:
        print(json.dumps({"iogt": record.iogt, "pcd": record.pcd,
                          "hausdorff": record.hausdorff, "compiled": record.compiled}))
    else:
        print(f"iogt      {record.iogt:.6f}")
        print(f"pcd       {record.pcd:.6f}")
        print(f"hausdorff {record.hausdorff:.6f}")
    return 0


def _read_compile_matrix(path):
    if not path:
        return None
    matrix = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.reader(handle):
            if not row or row[0] == "id":
                continue
            matrix[row[0]] = int(row[1])
    return matrix


def cmd_bench_run(args):
    cfg = _load_cfg(args)
    entries = bench_mod.load_dataset(args.dataset)
    configuration = bench_mod.RunConfiguration(
        model=get_str(cfg, "model", "gpt-4"),
        mode=args.mode or get_str(cfg, "pipeline.mode", "zero_shot"),
        mechanism=args.mechanism)
    out_dir = Path(args.out)

    def factory(config):
        artifacts = out_dir / "artifacts" / config.name
        pipeline = _pipeline_from(cfg, args, artifacts)
        return pipeline

    traces = bench_mod.run_benchmark(entries, [configuration], factory, out_dir,
                                     workers=args.workers)
    report = bench_mod.aggregate(traces)
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text())
    print(f"{len(traces)} traces under {out_dir}")
    return 0


def cmd_bench_report(args):
    trace_files = sorted(Path(args.traces).rglob("*.json"))
    traces = [bench_mod.RefinementTrace.load(p) for p in trace_files
              if p.name != "trace.json"]
    if not traces:
        print(f"no trace files under {args.traces}", file=sys.stderr)
        return 2
    strata = None
    if args.dataset:
        entries = bench_mod.load_dataset(args.dataset)
        strata = bench_mod.stratify(entries, _read_compile_matrix(args.compile_matrix))
    report = bench_mod.aggregate(traces, strata)
    out_dir = Path(args.out or args.traces)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text())
    return 0


def cmd_bench_stratify(args):
    entries = bench_mod.load_dataset(args.dataset)
    labels = bench_mod.stratify(entries, _read_compile_matrix(args.compile_matrix))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["id", "mesh_complexity", "compile_difficulty", "geometric_complexity"])
    for entry in entries:
        label = labels[entry.id]
        writer.writerow([entry.id, label.mesh_complexity,
                         label.compile_difficulty or "", entry.geometric_complexity or ""])
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_common(parser, with_mechanism=True):
    parser.add_argument("--config", help="key-value config file")
    parser.add_argument("--mode", choices=["zero_shot", "few_shot"],
                        help="prompting mode (default from config)")
    parser.add_argument("--library", help="few-shot example library (JSON or directory)")
    parser.add_argument("-N", "--repair-budget", type=int, dest="repair_budget",
                        help="max executions per repair loop")
    parser.add_argument("-M", "--refinements", type=int,
                        help="refinement rounds per episode")
    parser.add_argument("--seed", type=int, help="sampling seed")
    parser.add_argument("--artifacts", default="artifacts",
                        help="artifact output directory")
    if with_mechanism:
        parser.add_argument("--mechanism", choices=list(MECHANISMS),
                            default="cadcodeverify")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cadloop",
        description="Generate, execute, verify and refine CAD scripting code.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a candidate script from a description")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--description")
    group.add_argument("--description-file")
    p.add_argument("--out", help="write the script here instead of stdout")
    p.add_argument("--episode-id", default="adhoc")
    _add_common(p, with_mechanism=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("refine", help="run one full episode for a dataset entry")
    p.add_argument("--dataset", required=True)
    p.add_argument("--id", required=True, help="dataset entry id")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="score one STL against a ground-truth STL")
    p.add_argument("--generated", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hitl", help="run one episode with human-in-the-loop feedback")
    p.add_argument("--dataset", required=True)
    p.add_argument("--id", required=True)
    _add_common(p, with_mechanism=False)
    p.set_defaults(func=cmd_hitl)

    p = sub.add_parser("bench", help="benchmark orchestration")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)

    b = bench_sub.add_parser("run", help="run a dataset under one configuration")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=1)
    _add_common(b)
    b.set_defaults(func=cmd_bench_run)

    b = bench_sub.add_parser("report", help="aggregate saved traces into reports")
    b.add_argument("--traces", required=True)
    b.add_argument("--out")
    b.add_argument("--dataset", help="dataset root, enables stratum breakdowns")
    b.add_argument("--compile-matrix", help="CSV of id,success_count_out_of_6")
    b.set_defaults(func=cmd_bench_report)

    b = bench_sub.add_parser("stratify", help="print stratum labels for a dataset")
    b.add_argument("--dataset", required=True)
    b.add_argument("--compile-matrix")
    b.set_defaults(func=cmd_bench_stratify)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Dataset ingestion, stratification, benchmark orchestration and reports.

Dataset layout (one directory per example under the root):

    <root>/<id>/prompt.txt               natural-language description
    <root>/<id>/ground_truth.stl         reference object
    <root>/<id>/ground_truth_code.txt    optional reference script
    <root>/<id>/meta                     optional key=value metadata
                                         (geometric_complexity: Simple |
                                          Moderate | Complex | VeryComplex)

Reports aggregate per (configuration, stage, stratum): median and IQR
(linear-interpolation quantiles) of the three metrics over
penalty-substituted values, plus the compile rate as a percentage.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, EmptyInput, MissingGroundTruth, MissingPrompt
from .mesh import Mesh, mesh_complexity, parse_stl
from .metrics import STAGE_BEST_REFINE, STAGE_GENERATED, refine_stage
from .pipeline import RefinementTrace

log = logging.getLogger(__name__)

COMPLEXITY_SIMPLE = "Simple"
COMPLEXITY_COMPLEX = "Complex"
DIFFICULTY_EASY = "Easy"
DIFFICULTY_HARD = "Hard"

GEOMETRIC_LEVELS = ("Simple", "Moderate", "Complex", "VeryComplex")

STRATUM_ALL = "all"


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    description: str
    ground_truth_mesh: Mesh
    ground_truth_code: str | None = None
    geometric_complexity: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("entry id is empty")
        if not self.description.strip():
            raise ValueError(f"entry '{self.id}' has an empty description")
        if self.geometric_complexity is not None and \
                self.geometric_complexity not in GEOMETRIC_LEVELS:
            raise ValueError(
                f"entry '{self.id}': unknown geometric complexity "
                f"'{self.geometric_complexity}'")


@dataclass(frozen=True)
class StratumLabel:
    mesh_complexity: str
    compile_difficulty: str | None = None


@dataclass(frozen=True)
class ReportRow:
    config: str
    stage: str
    stratum: str
    n: int
    iogt_med: float
    iogt_iqr: float
    pcd_med: float
    pcd_iqr: float
    hd_med: float
    hd_iqr: float
    compile_rate_pct: float


@dataclass
class AggregateReport:
    rows: list[ReportRow] = field(default_factory=list)

    CSV_COLUMNS = ("config", "stage", "stratum", "iogt_med", "iogt_iqr",
                   "pcd_med", "pcd_iqr", "hd_med", "hd_iqr", "compile_rate_pct")

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([
                row.config, row.stage, row.stratum,
                f"{row.iogt_med:.6f}", f"{row.iogt_iqr:.6f}",
                f"{row.pcd_med:.6f}", f"{row.pcd_iqr:.6f}",
                f"{row.hd_med:.6f}", f"{row.hd_iqr:.6f}",
                f"{row.compile_rate_pct:.1f}",
            ])
        return buffer.getvalue()

    def to_text(self) -> str:
        """Aligned median (IQR) table, one block per configuration."""
        lines = []
        header = (f"{'config':<32} {'stage':<12} {'stratum':<8} {'n':>4} "
                  f"{'IoGT':>16} {'PointCloud':>16} {'Hausdorff':>16} {'Compile%':>9}")
        lines.append(header)
        lines.append("-" * len(header))
        for row in self.rows:
            lines.append(
                f"{row.config:<32} {row.stage:<12} {row.stratum:<8} {row.n:>4} "
                f"{row.iogt_med:>7.3f} ({row.iogt_iqr:.3f}) "
                f"{row.pcd_med:>7.3f} ({row.pcd_iqr:.3f}) "
                f"{row.hd_med:>7.3f} ({row.hd_iqr:.3f}) "
                f"{row.compile_rate_pct:>8.1f}%")
        return "\n".join(lines) + "\n"

    def row(self, config, stage, stratum=STRATUM_ALL) -> ReportRow:
        for row in self.rows:
            if (row.config, row.stage, row.stratum) == (config, stage, stratum):
                return row
        raise KeyError((config, stage, stratum))


# -- dataset loading -------------------------------------------------------------

def scan_dataset(root):
    """Load every well-formed entry; malformed entries come back as collected
    problems instead of aborting the scan."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} does not exist")
    entries = []
    problems = []
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        entry_id = directory.name
        prompt_path = directory / "prompt.txt"
        stl_path = directory / "ground_truth.stl"
        if not prompt_path.is_file():
            problems.append(MissingPrompt(f"{entry_id}: no prompt.txt"))
            continue
        if not stl_path.is_file():
            problems.append(MissingGroundTruth(f"{entry_id}: no ground_truth.stl"))
            continue
        try:
            mesh = parse_stl(stl_path.read_bytes(), source_name=entry_id)
        except Exception as exc:
            problems.append(MissingGroundTruth(f"{entry_id}: unreadable STL: {exc}"))
            continue
        code_path = directory / "ground_truth_code.txt"
        code = code_path.read_text(encoding="utf-8") if code_path.is_file() else None
        entries.append(DatasetEntry(
            id=entry_id,
            description=prompt_path.read_text(encoding="utf-8").strip(),
            ground_truth_mesh=mesh,
            ground_truth_code=code,
            geometric_complexity=_read_meta_complexity(directory / "meta"),
        ))
    return entries, problems


def _read_meta_complexity(path):
    if not path.is_file():
        return None
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        separator = "=" if "=" in line else (":" if ":" in line else None)
        if separator is None:
            continue
        key, _, value = line.partition(separator)
        if key.strip() == "geometric_complexity":
            normalized = value.strip().replace(" ", "")
            for level in GEOMETRIC_LEVELS:
                if normalized.lower() == level.lower():
                    return level
            raise ValueError(f"unknown geometric_complexity '{value.strip()}' in {path}")
    return None


def load_dataset(root) -> list[DatasetEntry]:
    """Entries sorted by id; per-entry problems are logged, an empty result
    raises EmptyDataset."""
    entries, problems = scan_dataset(root)
    for problem in problems:
        log.warning("dataset problem: %s", problem)
    if not entries:
        raise EmptyDataset(f"no loadable entries under {root}")
    return entries


# -- stratification ----------------------------------------------------------------

def stratify(entries, compile_matrix=None) -> dict[str, StratumLabel]:
    """Median split on vertices+faces (score at or below the dataset median is
    Simple), plus the at-least-4-of-6 compile-difficulty rule when a compile
    matrix is supplied."""
    if not entries:
        raise EmptyInput("no entries to stratify")
    scores = {e.id: mesh_complexity(e.ground_truth_mesh).score for e in entries}
    median = float(np.median(list(scores.values())))
    labels = {}
    for entry in entries:
        complexity = COMPLEXITY_SIMPLE if scores[entry.id] <= median else COMPLEXITY_COMPLEX
        difficulty = None
        if compile_matrix is not None:
            count = compile_matrix.get(entry.id, 0)
            difficulty = DIFFICULTY_EASY if count >= 4 else DIFFICULTY_HARD
        labels[entry.id] = StratumLabel(mesh_complexity=complexity,
                                        compile_difficulty=difficulty)
    return labels


# -- benchmark orchestration ---------------------------------------------------------

@dataclass(frozen=True)
class RunConfiguration:
    model: str
    mode: str
    mechanism: str

    @property
    def name(self):
        return f"{self.model}_{self.mode}_{self.mechanism}"


def run_benchmark(entries, configurations, pipeline_factory, out_dir,
                  workers: int = 1) -> list[RefinementTrace]:
    """Run every (entry x configuration) episode with bounded concurrency.

    ``pipeline_factory(configuration) -> Pipeline`` supplies a pipeline wired
    for that configuration. Each trace is persisted as soon as its episode
    finishes; a rerun loads existing trace files instead of re-running them,
    so an interrupted benchmark resumes where it stopped.
    """
    out_dir = Path(out_dir)
    jobs = []
    for configuration in configurations:
        for entry in entries:
            jobs.append((configuration, entry))

    pipelines = {}

    def pipeline_for(configuration):
        if configuration.name not in pipelines:
            pipelines[configuration.name] = pipeline_factory(configuration)
        return pipelines[configuration.name]

    def run_one(job):
        configuration, entry = job
        trace_path = out_dir / configuration.name / f"{entry.id}.json"
        if trace_path.exists():
            return RefinementTrace.load(trace_path)
        pipeline = pipeline_for(configuration)
        trace = pipeline.run_episode(
            entry, mechanism=configuration.mechanism,
            episode_id=f"{configuration.name}--{entry.id}",
            config_name=configuration.name)
        trace.save(trace_path)
        return trace

    if workers <= 1:
        return [run_one(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run_one, jobs))


# -- aggregation ----------------------------------------------------------------------

def _quantile(values, q):
    return float(np.quantile(np.asarray(values, dtype=float), q, method="linear"))


def _group_rows(config, stage, stratum, records):
    iogt_values = [r.iogt for r in records]
    pcd_values = [r.pcd for r in records]
    hd_values = [r.hausdorff for r in records]
    return ReportRow(
        config=config, stage=stage, stratum=stratum, n=len(records),
        iogt_med=_quantile(iogt_values, 0.5),
        iogt_iqr=_quantile(iogt_values, 0.75) - _quantile(iogt_values, 0.25),
        pcd_med=_quantile(pcd_values, 0.5),
        pcd_iqr=_quantile(pcd_values, 0.75) - _quantile(pcd_values, 0.25),
        hd_med=_quantile(hd_values, 0.5),
        hd_iqr=_quantile(hd_values, 0.75) - _quantile(hd_values, 0.25),
        compile_rate_pct=100.0 * sum(r.compiled for r in records) / len(records),
    )


def _entry_id(trace):
    episode = trace.episode_id
    return episode.split("--", 1)[1] if "--" in episode else episode


def aggregate(traces, strata=None) -> AggregateReport:
    """Median/IQR/compile-rate rows per (configuration, stage, stratum).

    Stage records already carry penalty values for failed stages, so medians
    are computed over penalty-substituted data across all examples.
    """
    traces = list(traces)
    if not traces:
        raise EmptyInput("no traces to aggregate")
    stage_order = {}
    grouped = {}
    for trace in traces:
        config = trace.config.get("name", trace.config.get("mechanism", "run"))
        for record in trace.metric_records():
            strata_for_trace = [STRATUM_ALL]
            if strata is not None:
                label = strata.get(_entry_id(trace))
                if label is not None:
                    strata_for_trace.append(label.mesh_complexity)
                    if label.compile_difficulty is not None:
                        strata_for_trace.append(label.compile_difficulty)
            for stratum in strata_for_trace:
                grouped.setdefault((config, record.stage, stratum), []).append(record)
            stage_order.setdefault(record.stage, len(stage_order))
    stratum_order = {STRATUM_ALL: 0, COMPLEXITY_SIMPLE: 1, COMPLEXITY_COMPLEX: 2,
                     DIFFICULTY_EASY: 3, DIFFICULTY_HARD: 4}
    keys = sorted(grouped, key=lambda k: (k[0], stage_order[k[1]],
                                          stratum_order.get(k[2], 99)))
    report = AggregateReport()
    for config, stage, stratum in keys:
        report.rows.append(_group_rows(config, stage, stratum,
                                       grouped[(config, stage, stratum)]))
    return report


def expected_stages(refinement_budget: int = 2):
    stages = [STAGE_GENERATED]
    stages.extend(refine_stage(i) for i in range(1, refinement_budget + 1))
    stages.append(STAGE_BEST_REFINE)
    return stages

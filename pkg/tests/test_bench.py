import math
import sys

import numpy as np
import pytest

from cadloop.bench import (
    AggregateReport, DatasetEntry, RunConfiguration, aggregate, load_dataset,
    run_benchmark, scan_dataset, stratify,
)
from cadloop.errors import EmptyDataset, EmptyInput, MissingGroundTruth, MissingPrompt
from cadloop.executor import ExecutorClient
from cadloop.gateway import MockTransport, ModelGateway
from cadloop.mesh import Mesh, box_mesh, mesh_complexity, write_stl
from cadloop.metrics import FAILURE_DISTANCE, MetricRecord, penalty_record
from cadloop.pipeline import Pipeline, PipelineSettings, RefinementTrace, StageRecord

from mock_replies import happy_episode_replies

STUB_CMD = [sys.executable, "-m", "cadloop.testing.stub_runner"]


def disjoint_triangle_mesh(count):
    """A mesh of ``count`` separated triangles: score = 3*count + count."""
    soup = []
    for i in range(count):
        x = 10.0 * i
        soup.append([[x, 0, 0], [x + 1, 0, 0], [x, 1, 0]])
    return Mesh.from_triangle_soup(np.array(soup))


def write_dataset(root, count=3, meta_for=()):
    for i in range(count):
        entry_dir = root / f"entry{i:02d}"
        entry_dir.mkdir(parents=True)
        (entry_dir / "prompt.txt").write_text(f"a box variant {i}")
        size = (1.0 + i, 1.0, 1.0)
        (entry_dir / "ground_truth.stl").write_bytes(write_stl(box_mesh(size=size)))
        if i in meta_for:
            (entry_dir / "meta").write_text("geometric_complexity = Very Complex\n")
    return root


class TestLoadDataset:
    def test_well_formed_entries_sorted(self, tmp_path):
        write_dataset(tmp_path, 3, meta_for=(1,))
        entries = load_dataset(tmp_path)
        assert [e.id for e in entries] == ["entry00", "entry01", "entry02"]
        assert entries[0].description == "a box variant 0"
        assert entries[1].geometric_complexity == "VeryComplex"
        assert entries[0].geometric_complexity is None

    def test_missing_stl_reported_others_load(self, tmp_path):
        write_dataset(tmp_path, 3)
        (tmp_path / "entry01" / "ground_truth.stl").unlink()
        entries, problems = scan_dataset(tmp_path)
        assert [e.id for e in entries] == ["entry00", "entry02"]
        assert len(problems) == 1 and isinstance(problems[0], MissingGroundTruth)

    def test_missing_prompt_reported(self, tmp_path):
        write_dataset(tmp_path, 2)
        (tmp_path / "entry00" / "prompt.txt").unlink()
        entries, problems = scan_dataset(tmp_path)
        assert [e.id for e in entries] == ["entry01"]
        assert isinstance(problems[0], MissingPrompt)

    def test_empty_root(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_dataset(tmp_path)

    def test_optional_code_attached(self, tmp_path):
        write_dataset(tmp_path, 1)
        (tmp_path / "entry00" / "ground_truth_code.txt").write_text("box()")
        assert load_dataset(tmp_path)[0].ground_truth_code == "box()"


class TestStratify:
    def entry(self, entry_id, triangle_count):
        return DatasetEntry(id=entry_id, description="x",
                            ground_truth_mesh=disjoint_triangle_mesh(triangle_count))

    def test_median_split(self):
        # scores are 4 * triangle count: 20, 100, 300, 1000
        entries = [self.entry("a", 5), self.entry("b", 25),
                   self.entry("c", 75), self.entry("d", 250)]
        scores = [mesh_complexity(e.ground_truth_mesh).score for e in entries]
        assert scores == [20, 100, 300, 1000]
        labels = stratify(entries)
        assert labels["a"].mesh_complexity == "Simple"
        assert labels["b"].mesh_complexity == "Simple"
        assert labels["c"].mesh_complexity == "Complex"
        assert labels["d"].mesh_complexity == "Complex"

    def test_compile_difficulty_boundary(self):
        entries = [self.entry("a", 5), self.entry("b", 6), self.entry("c", 7)]
        labels = stratify(entries, compile_matrix={"a": 6, "b": 4, "c": 3})
        assert labels["a"].compile_difficulty == "Easy"
        assert labels["b"].compile_difficulty == "Easy"
        assert labels["c"].compile_difficulty == "Hard"

    def test_single_entry_is_simple(self):
        labels = stratify([self.entry("only", 9)])
        assert labels["only"].mesh_complexity == "Simple"

    def test_no_matrix_leaves_difficulty_unset(self):
        labels = stratify([self.entry("a", 5)])
        assert labels["a"].compile_difficulty is None

    def test_empty_entries(self):
        with pytest.raises(EmptyInput):
            stratify([])


def make_factory(tmp_path, stub_executor, scripts, calls):
    def factory(configuration):
        calls.append(configuration.name)
        gateway = ModelGateway(MockTransport(scripts), model_id=configuration.model,
                               sleep=lambda s: None)
        return Pipeline(gateway, stub_executor,
                        settings=PipelineSettings(view_resolution=64, n_points=200),
                        artifact_root=tmp_path / "artifacts" / configuration.name)
    return factory


@pytest.fixture
def stub_executor():
    executor = ExecutorClient(STUB_CMD, mode="persistent")
    yield executor
    executor.close()


class TestRunBenchmark:
    def test_traces_written_and_resume_skips(self, tmp_path, stub_executor):
        write_dataset(tmp_path / "data", 4)
        entries = load_dataset(tmp_path / "data")
        config = RunConfiguration(model="mock", mode="zero_shot", mechanism="cadcodeverify")
        calls = []
        factory = make_factory(tmp_path, stub_executor, {"*": happy_episode_replies()}, calls)
        traces = run_benchmark(entries, [config], factory, tmp_path / "out")
        assert len(traces) == 4
        assert calls == [config.name]
        trace_files = sorted((tmp_path / "out" / config.name).glob("*.json"))
        assert len(trace_files) == 4

        calls_again = []
        factory_again = make_factory(tmp_path, stub_executor, {"*": []}, calls_again)
        resumed = run_benchmark(entries, [config], factory_again, tmp_path / "out")
        assert len(resumed) == 4
        assert calls_again == []  # nothing re-ran, no pipelines were built

    def test_cross_product(self, tmp_path, stub_executor):
        write_dataset(tmp_path / "data", 2)
        entries = load_dataset(tmp_path / "data")
        configs = [
            RunConfiguration(model="mock", mode="zero_shot", mechanism="cadcodeverify"),
            RunConfiguration(model="mock", mode="few_shot", mechanism="premise"),
        ]

        def factory(configuration):
            gateway = ModelGateway(MockTransport({"*": happy_episode_replies()}),
                                   model_id=configuration.model, sleep=lambda s: None)
            settings = PipelineSettings(view_resolution=64, n_points=200)
            if configuration.mode == "few_shot":
                from cadloop.gateway import FewShotExample, FewShotLibrary
                library = FewShotLibrary((FewShotExample(code="box()"),))
                settings = PipelineSettings(view_resolution=64, n_points=200,
                                            mode="few_shot", few_shot_k=1)
                return Pipeline(ModelGateway(
                    MockTransport({"*": ["```python\nSTUB:OK\n```",
                                         "```python\nSTUB:OK:BOX:2,1,1\n```",
                                         "```python\nSTUB:OK:BOX:1,2,1\n```"]}),
                    model_id=configuration.model, sleep=lambda s: None),
                    stub_executor, settings=settings, library=library,
                    artifact_root=tmp_path / "artifacts" / configuration.name)
            return Pipeline(gateway, stub_executor, settings=settings,
                            artifact_root=tmp_path / "artifacts" / configuration.name)

        traces = run_benchmark(entries, configs, factory, tmp_path / "out")
        assert len(traces) == 4
        names = {t.config["name"] for t in traces}
        assert names == {c.name for c in configs}

    def test_interrupted_run_resumes_to_full_count(self, tmp_path, stub_executor):
        write_dataset(tmp_path / "data", 3)
        entries = load_dataset(tmp_path / "data")
        config = RunConfiguration(model="mock", mode="zero_shot", mechanism="cadcodeverify")
        factory = make_factory(tmp_path, stub_executor,
                               {"*": happy_episode_replies()}, [])
        run_benchmark(entries[:1], [config], factory, tmp_path / "out")
        traces = run_benchmark(entries, [config], factory, tmp_path / "out")
        assert len(traces) == 3
        assert len(list((tmp_path / "out" / config.name).glob("*.json"))) == 3

    def test_parallel_workers(self, tmp_path, stub_executor):
        write_dataset(tmp_path / "data", 4)
        entries = load_dataset(tmp_path / "data")
        config = RunConfiguration(model="mock", mode="zero_shot", mechanism="cadcodeverify")
        factory = make_factory(tmp_path, stub_executor, {"*": happy_episode_replies()}, [])
        traces = run_benchmark(entries, [config], factory, tmp_path / "out", workers=3)
        assert len(traces) == 4

    def test_parallel_matches_serial(self, tmp_path):
        # episodes are independent: a 3-worker run replays the single-worker
        # run exactly, trace for trace
        write_dataset(tmp_path / "data", 6)
        entries = load_dataset(tmp_path / "data")
        config = RunConfiguration(model="mock", mode="zero_shot", mechanism="cadcodeverify")
        scripts = {f"{config.name}--{e.id}": happy_episode_replies() for e in entries}

        results = {}
        for label, workers in (("serial", 1), ("parallel", 3)):
            executor = ExecutorClient(STUB_CMD, mode="persistent", pool_size=3)
            factory = make_factory(tmp_path / label, executor, scripts, [])
            results[label] = run_benchmark(entries, [config], factory,
                                           tmp_path / label / "out", workers=workers)
            executor.close()
        for serial, parallel in zip(results["serial"], results["parallel"]):
            assert serial.fingerprint() == parallel.fingerprint()


def trace_with(config_name, entry_id, stage_metrics):
    trace = RefinementTrace(episode_id=f"{config_name}--{entry_id}",
                            description="d", config={"name": config_name})
    for stage, metric in stage_metrics[:-1]:
        trace.stages.append(StageRecord(stage=stage, metrics=metric))
    trace.best_refine = stage_metrics[-1][1]
    return trace


def compiled_metric(stage, iogt, pcd, hausdorff):
    return MetricRecord(iogt=iogt, pcd=pcd, hausdorff=hausdorff, compiled=True, stage=stage)


def manual_quantile(values, q):
    ordered = sorted(values)
    rank = (len(ordered) - 1) * q
    lower = math.floor(rank)
    upper = math.ceil(rank)
    return ordered[lower] + (ordered[upper] - ordered[lower]) * (rank - lower)


class TestAggregate:
    def simple_traces(self, pcds, config="cfg", iogt=0.9):
        traces = []
        for i, pcd in enumerate(pcds):
            if pcd is None:
                generated = penalty_record("generated")
                best = penalty_record("best_refine")
            else:
                generated = compiled_metric("generated", iogt, pcd, 2 * pcd)
                best = compiled_metric("best_refine", iogt, pcd, 2 * pcd)
            traces.append(trace_with(config, f"e{i}", [
                ("generated", generated), ("best_refine", best)]))
        return traces

    def test_penalty_substitution_in_median(self):
        report = aggregate(self.simple_traces([0.1, 0.2, None]))
        row = report.row("cfg", "generated")
        substituted = [0.1, 0.2, FAILURE_DISTANCE]
        assert row.pcd_med == pytest.approx(np.median(substituted), abs=1e-12)
        assert row.pcd_med == pytest.approx(0.2, abs=1e-12)
        assert row.compile_rate_pct == pytest.approx(100 * 2 / 3)

    def test_compile_rate_arithmetic(self):
        report = aggregate(self.simple_traces([0.1] * 193 + [None] * 7))
        assert report.row("cfg", "generated").compile_rate_pct == pytest.approx(96.5)

    def test_quantiles_match_independent_routine(self):
        rng = np.random.RandomState(3)
        pcds = list(rng.uniform(0, 1, size=11))
        report = aggregate(self.simple_traces(pcds))
        row = report.row("cfg", "generated")
        assert row.pcd_med == pytest.approx(manual_quantile(pcds, 0.5), abs=1e-12)
        expected_iqr = manual_quantile(pcds, 0.75) - manual_quantile(pcds, 0.25)
        assert row.pcd_iqr == pytest.approx(expected_iqr, abs=1e-12)

    def test_permutation_invariance(self):
        traces = self.simple_traces([0.4, 0.1, None, 0.3, 0.2])
        report_a = aggregate(traces)
        report_b = aggregate(list(reversed(traces)))
        assert report_a.to_csv() == report_b.to_csv()

    def test_identical_objects_report_perfect_scores(self):
        traces = self.simple_traces([0.0] * 4, iogt=1.0)
        row = aggregate(traces).row("cfg", "generated")
        assert row.iogt_med == 1.0
        assert row.pcd_med == 0.0
        assert row.compile_rate_pct == 100.0

    def test_stratum_breakdowns_partition_dataset(self):
        traces = self.simple_traces([0.1, 0.2, 0.3, 0.4])
        entries = [DatasetEntry(id=f"e{i}", description="x",
                                ground_truth_mesh=disjoint_triangle_mesh(3 + 2 * i))
                   for i in range(4)]
        strata = stratify(entries, compile_matrix={"e0": 6, "e1": 5, "e2": 1, "e3": 0})
        report = aggregate(traces, strata)
        all_row = report.row("cfg", "generated", "all")
        simple = report.row("cfg", "generated", "Simple")
        complex_row = report.row("cfg", "generated", "Complex")
        easy = report.row("cfg", "generated", "Easy")
        hard = report.row("cfg", "generated", "Hard")
        assert simple.n + complex_row.n == all_row.n == 4
        assert easy.n + hard.n == all_row.n

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            aggregate([])

    def test_csv_round_trip_columns(self):
        report = aggregate(self.simple_traces([0.1, 0.2]))
        lines = report.to_csv().splitlines()
        assert lines[0] == ",".join(AggregateReport.CSV_COLUMNS)
        assert len(lines) == 1 + len(report.rows)

    def test_text_table_contains_rows(self):
        text = aggregate(self.simple_traces([0.1, 0.2])).to_text()
        assert "generated" in text and "best_refine" in text and "%" in text

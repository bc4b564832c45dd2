"""Acceptance suite: one test per criterion, each printing PASS/FAIL
(see the hook in conftest.py). Tolerances are fixed here, not configurable.
"""

import math
import sys
import time

import numpy as np
import pytest

from cadloop.bench import (
    DatasetEntry, RunConfiguration, aggregate, load_dataset, run_benchmark, stratify,
)
from cadloop.executor import ExecutorClient
from cadloop.gateway import MockTransport, ModelGateway
from cadloop.mesh import box_mesh, geometric_properties, parse_stl, write_stl
from cadloop.metrics import (
    FAILURE_DISTANCE, PointCloud, hausdorff_distance, icp_align, iogt,
    point_cloud_distance, sample_surface,
)
from cadloop.pipeline import Pipeline, PipelineSettings
from cadloop.views import render_views

from conftest import box_corners, oracle_write_binary_stl
from mock_replies import answers_reply, code_reply, questions_reply
from test_bench import disjoint_triangle_mesh, manual_quantile
from test_views import dilate, rotate_minus_90_about_bbox_center

STUB_CMD = [sys.executable, "-m", "cadloop.testing.stub_runner"]


# -- 1. metric oracle equivalence -----------------------------------------------------

def brute_force_chamfer(p, q):
    mins_pq = [min(math.dist(a, b) for b in q) for a in p]
    mins_qp = [min(math.dist(b, a) for a in p) for b in q]
    return 0.5 * sum(mins_pq) / len(p) + 0.5 * sum(mins_qp) / len(q)


def brute_force_hausdorff(p, q):
    mins_pq = [min(math.dist(a, b) for b in q) for a in p]
    mins_qp = [min(math.dist(b, a) for a in p) for b in q]
    return max(max(mins_pq), max(mins_qp))


def direct_aabb_iogt(p, q):
    g_lo = [min(c) for c in zip(*p)]
    g_hi = [max(c) for c in zip(*p)]
    t_lo = [min(c) for c in zip(*q)]
    t_hi = [max(c) for c in zip(*q)]
    gt_volume = 1.0
    overlap = 1.0
    for axis in range(3):
        gt_volume *= t_hi[axis] - t_lo[axis]
        overlap *= max(0.0, min(g_hi[axis], t_hi[axis]) - max(g_lo[axis], t_lo[axis]))
    return min(1.0, overlap / gt_volume)


def test_metric_oracle_equivalence():
    rng = np.random.RandomState(2024)
    started = time.monotonic()
    for _ in range(50):
        p = rng.uniform(0.0, 1.0, size=(rng.randint(2, 65), 3))
        q = rng.uniform(0.0, 1.0, size=(rng.randint(2, 65), 3))
        p_list = [tuple(row) for row in p]
        q_list = [tuple(row) for row in q]
        pc, qc = PointCloud(p), PointCloud(q)
        assert abs(point_cloud_distance(pc, qc) - brute_force_chamfer(p_list, q_list)) <= 1e-9
        assert abs(hausdorff_distance(pc, qc) - brute_force_hausdorff(p_list, q_list)) <= 1e-9
        assert abs(iogt(pc, qc) - direct_aabb_iogt(p_list, q_list)) <= 1e-12
    assert time.monotonic() - started < 5.0


# -- 2. ICP recovery --------------------------------------------------------------------

def random_rotation(rng, max_degrees):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def test_icp_recovery():
    cube = box_mesh()
    rng = np.random.RandomState(12345)
    recovered = 0
    for trial in range(100):
        fixed = sample_surface(cube, 1000, seed=trial)
        rotation = random_rotation(rng, 30.0)
        translation = rng.uniform(-0.5, 0.5, size=3)
        moving = PointCloud(fixed.points @ rotation.T + translation)
        started = time.monotonic()
        _, _, history = icp_align(moving, fixed)
        assert time.monotonic() - started < 1.0
        if history[-1] < 1e-6:
            recovered += 1
    assert recovered >= 95


# -- 3. penalty semantics ----------------------------------------------------------------

def test_penalty_semantics(tmp_path):
    executor = ExecutorClient(STUB_CMD, mode="persistent")
    try:
        replies = [code_reply("STUB:FAIL:a"), code_reply("STUB:FAIL:b"),
                   code_reply("STUB:FAIL:c"), code_reply("STUB:FAIL:d"),
                   code_reply("STUB:FAIL:e"), code_reply("STUB:FAIL:f"),
                   code_reply("STUB:FAIL:g"), code_reply("STUB:FAIL:h"),
                   code_reply("STUB:FAIL:i")]
        gateway = ModelGateway(MockTransport(replies), model_id="mock", sleep=lambda s: None)
        pipeline = Pipeline(gateway, executor,
                            settings=PipelineSettings(view_resolution=64, n_points=200),
                            artifact_root=tmp_path / "artifacts")
        entry = DatasetEntry(id="doomed", description="a cube",
                             ground_truth_mesh=box_mesh())
        trace = pipeline.run_episode(entry, mechanism="cadcodeverify")
    finally:
        executor.close()

    for record in trace.stages + [trace.best_refine]:
        metric = record.metrics if hasattr(record, "metrics") else record
        assert not metric.compiled
        assert metric.pcd == FAILURE_DISTANCE == math.sqrt(3.0)
        assert metric.hausdorff == FAILURE_DISTANCE
        assert metric.iogt == 0.0

    # the penalties flow through aggregation: medians recomputed with an
    # independent quantile routine agree to 1e-12
    from test_bench import compiled_metric, trace_with
    traces = [trace_with("cfg", "ok1", [("generated", compiled_metric("generated", 0.9, 0.1, 0.2)),
                                        ("best_refine", compiled_metric("best_refine", 0.9, 0.1, 0.2))]),
              trace_with("cfg", "ok2", [("generated", compiled_metric("generated", 0.9, 0.2, 0.4)),
                                        ("best_refine", compiled_metric("best_refine", 0.9, 0.2, 0.4))])]
    from cadloop.metrics import penalty_record
    traces.append(trace_with("cfg", "bad", [("generated", penalty_record("generated")),
                                            ("best_refine", penalty_record("best_refine"))]))
    report = aggregate(traces)
    row = report.row("cfg", "generated")
    substituted = [0.1, 0.2, FAILURE_DISTANCE]
    assert abs(row.pcd_med - manual_quantile(substituted, 0.5)) <= 1e-12
    assert abs(row.pcd_iqr - (manual_quantile(substituted, 0.75)
                              - manual_quantile(substituted, 0.25))) <= 1e-12
    assert row.compile_rate_pct == pytest.approx(100 * 2 / 3, abs=1e-12)


# -- 4. geometry exactness ----------------------------------------------------------------

def test_geometry_exactness():
    original = parse_stl(oracle_write_binary_stl(box_corners()))
    mesh = parse_stl(write_stl(original))  # full write/parse round trip
    p = geometric_properties(mesh)
    assert abs(p.width - 1.0) <= 1e-9
    assert abs(p.height - 1.0) <= 1e-9
    assert abs(p.depth - 1.0) <= 1e-9
    assert abs(p.bbox_diagonal - math.sqrt(3.0)) <= 1e-9
    assert abs(p.bbox_volume - 1.0) <= 1e-9
    assert abs(p.enclosed_volume - 1.0) <= 1e-9
    assert abs(p.surface_area - 6.0) <= 1e-9
    assert p.triangle_count == 12
    assert p.vertex_count == 8
    assert p.edge_count == 18
    assert abs(p.centroid_x - 0.5) <= 1e-9
    assert abs(p.centroid_y - 0.5) <= 1e-9
    assert abs(p.centroid_z - 0.5) <= 1e-9


# -- 5. pipeline replay determinism ----------------------------------------------------------

def verification_round(verdicts, refined_directive=None):
    questions = [f"{'ALPHA' if v.lower() == 'yes' else 'BRAVO'} point {i}?"
                 for i, v in enumerate(verdicts, start=1)]
    replies = [questions_reply(*questions), answers_reply(*verdicts)]
    if not all(v.lower() == "yes" for v in verdicts):
        replies.append("Corrective feedback: adjust the flagged aspects.")
        replies.append(code_reply(refined_directive))
    return replies


def build_episode_scripts(config_name):
    """Ten scripted episodes covering repair, recovery, early stop, failed
    refinement, and best-refine selection both ways."""
    scripts = {}

    def key(i):
        return f"{config_name}--entry{i:02d}"

    # e00: happy path, all-Yes stop before the second refinement
    scripts[key(0)] = ([code_reply("STUB:OK")]
                       + verification_round(["Yes", "No", "Unclear"], "STUB:OK:BOX:2,1,1")
                       + verification_round(["Yes", "Yes", "Yes"]))
    # e01: generation repairs twice, then two full refinement rounds
    scripts[key(1)] = ([code_reply("STUB:FAIL:errA"), code_reply("STUB:FAIL:errB"),
                        code_reply("STUB:OK")]
                       + verification_round(["No", "No"], "STUB:OK:BOX:2,1,1")
                       + verification_round(["No", "Yes"], "STUB:OK:BOX:2,1,2"))
    # e02: generation never compiles; refine1 recovers by repair; refine2 normal
    scripts[key(2)] = ([code_reply("STUB:FAIL:e1"), code_reply("STUB:FAIL:e2"),
                        code_reply("STUB:FAIL:e3"),
                        code_reply("STUB:OK")]
                       + verification_round(["Yes", "No"], "STUB:OK:BOX:3,1,1"))
    # e03: immediate all-Yes after generation; both refinements carried
    scripts[key(3)] = [code_reply("STUB:OK")] + verification_round(["Yes", "Yes"])
    # e04: refine1's code never compiles; refine2 refines from the generated object
    scripts[key(4)] = ([code_reply("STUB:OK")]
                       + verification_round(["No", "Unclear"], "STUB:FAIL:r1")
                       + [code_reply("STUB:FAIL:r2"), code_reply("STUB:FAIL:r3")]
                       + verification_round(["No", "Yes"], "STUB:OK:BOX:1,2,1"))
    # e05..e09: two refinement rounds; even entries improve at refine2,
    # odd entries are best at refine1
    for i in range(5, 10):
        ground = f"{1 + i},1,1"
        near = f"{1 + i},1,{1.25 if i % 2 == 0 else 0.75}"
        exact_round = verification_round(["No", "No"], f"STUB:OK:BOX:{ground}")
        near_round = verification_round(["No", "Yes"], f"STUB:OK:BOX:{near}")
        if i % 2 == 0:
            scripts[key(i)] = [code_reply("STUB:OK")] + near_round + exact_round
        else:
            scripts[key(i)] = [code_reply("STUB:OK")] + exact_round + near_round
    return scripts


def run_mock_benchmark(data_root, out_dir, executor):
    entries = load_dataset(data_root)
    configuration = RunConfiguration(model="mock", mode="zero_shot",
                                     mechanism="cadcodeverify")
    scripts = build_episode_scripts(configuration.name)
    gateways = []

    def factory(config):
        gateway = ModelGateway(MockTransport(scripts), model_id=config.model,
                               sleep=lambda s: None)
        gateways.append(gateway)
        return Pipeline(
            gateway, executor,
            settings=PipelineSettings(repair_budget=3, refinement_budget=2,
                                      view_resolution=64, n_points=200),
            artifact_root=out_dir / "artifacts")

    traces = run_benchmark(entries, [configuration], factory, out_dir)
    return traces, gateways[0], configuration


def test_pipeline_replay_determinism(tmp_path):
    from test_bench import write_dataset

    write_dataset(tmp_path / "data", 10)
    started = time.monotonic()
    executor = ExecutorClient(STUB_CMD, mode="persistent")
    try:
        traces_a, gateway_a, configuration = run_mock_benchmark(
            tmp_path / "data", tmp_path / "run_a", executor)
        traces_b, gateway_b, _ = run_mock_benchmark(
            tmp_path / "data", tmp_path / "run_b", executor)
    finally:
        executor.close()
    elapsed = time.monotonic() - started
    assert elapsed < 30.0

    assert len(traces_a) == len(traces_b) == 10
    for trace_a, trace_b in zip(traces_a, traces_b):
        assert trace_a.fingerprint() == trace_b.fingerprint()
    assert aggregate(traces_a).to_csv() == aggregate(traces_b).to_csv()

    # the full request log (ordering, temperatures, image counts) replays
    # identically as well
    def log_shape(gateway):
        return [(r.kind, r.episode_id, r.temperature, r.image_count)
                for r in gateway.request_log]

    assert log_shape(gateway_a) == log_shape(gateway_b)

    # temperature policy over the whole request log
    assert gateway_a.request_log, "expected requests in the log"
    for record in gateway_a.request_log:
        expected = 1.0 if record.kind == "repair" else 0.0
        assert record.temperature == expected, (record.kind, record.temperature)

    # Yes-omission: no feedback prompt carries a Yes-verdict question
    feedback_requests = [r for r in gateway_a.request_log if r.kind == "feedback"]
    assert feedback_requests
    for record in feedback_requests:
        assert "ALPHA" not in record.prompt_text
        assert "BRAVO" in record.prompt_text

    # early-stop: after an all-Yes answer reply, the episode goes silent
    all_yes_text = answers_reply("Yes", "Yes")
    episode = f"{configuration.name}--entry03"
    episode_records = [r for r in gateway_a.request_log if r.episode_id == episode]
    assert episode_records[-1].reply_text == all_yes_text
    trace_e03 = next(t for t in traces_a if t.episode_id == episode)
    assert trace_e03.stage_record("refine1").carried_from == "generated"
    assert trace_e03.stage_record("refine2").carried_from == "generated"

    # best-refine selection across every trace
    for trace in traces_a:
        compiled = [s.metrics.pcd for s in trace.stages
                    if s.stage.startswith("refine") and s.metrics.compiled]
        if compiled:
            assert trace.best_refine.compiled
            assert trace.best_refine.pcd == min(compiled)
        else:
            assert not trace.best_refine.compiled
            assert trace.best_refine.pcd == FAILURE_DISTANCE

    # stage structure: three scored stages plus the selection record
    for trace in traces_a:
        assert [s.stage for s in trace.stages] == ["generated", "refine1", "refine2"]
        assert trace.best_refine.stage == "best_refine"

    # scenario spot checks: refine2 wins on even entries five through nine
    by_id = {t.episode_id.rsplit("--", 1)[1]: t for t in traces_a}
    for i in (6, 8):
        trace = by_id[f"entry{i:02d}"]
        assert trace.best_refine.pcd == trace.stage_record("refine2").metrics.pcd
        assert trace.stage_record("refine2").metrics.pcd < \
            trace.stage_record("refine1").metrics.pcd
    for i in (5, 7, 9):
        trace = by_id[f"entry{i:02d}"]
        assert trace.best_refine.pcd == trace.stage_record("refine1").metrics.pcd


# -- 6. stratification ------------------------------------------------------------------------

def test_stratification_rules():
    entries = [DatasetEntry(id=name, description="x",
                            ground_truth_mesh=disjoint_triangle_mesh(count))
               for name, count in (("a", 5), ("b", 25), ("c", 75), ("d", 250))]
    labels = stratify(entries, compile_matrix={"a": 6, "b": 4, "c": 3, "d": 0})
    assert labels["a"].mesh_complexity == "Simple"
    assert labels["b"].mesh_complexity == "Simple"
    assert labels["c"].mesh_complexity == "Complex"
    assert labels["d"].mesh_complexity == "Complex"
    assert labels["a"].compile_difficulty == "Easy"
    assert labels["b"].compile_difficulty == "Easy"
    assert labels["c"].compile_difficulty == "Hard"
    assert labels["d"].compile_difficulty == "Hard"

    single = [DatasetEntry(id="only", description="x",
                           ground_truth_mesh=disjoint_triangle_mesh(9))]
    assert stratify(single)["only"].mesh_complexity == "Simple"


# -- 7. renderer determinism and geometry ------------------------------------------------------

def test_renderer_determinism_and_geometry():
    slab = box_mesh(size=(2.0, 1.0, 1.0))
    first = render_views(slab, 256)
    second = render_views(slab, 256)
    for view_a, view_b in zip(first, second):
        assert view_a.png_bytes() == view_b.png_bytes()

    rotated = render_views(rotate_minus_90_about_bbox_center(slab), 256)
    mask_original = first.view(90).silhouette()
    mask_rotated = rotated.view(0).silhouette()
    assert (~mask_original | dilate(mask_rotated)).all()
    assert (~mask_rotated | dilate(mask_original)).all()

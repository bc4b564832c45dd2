"""Benchmark a small synthetic dataset and aggregate a median (IQR) report.

Run:  python demos/05_benchmark_and_report.py
"""

import json
import sys
import tempfile
from pathlib import Path

from cadloop import (
    ExecutorClient, MockTransport, ModelGateway, Pipeline, PipelineSettings,
    RunConfiguration, aggregate, box_mesh, load_dataset, run_benchmark,
    stratify, write_stl,
)

REPLIES = [
    "```python\nSTUB:OK\n```",
    "1. Is it the right shape?\n2. Is it closed?",
    "1. **Q**\n   - **Answer:** No\n   - **Reasoning:** Proportions are off.\n"
    "2. **Q**\n   - **Answer:** Yes\n   - **Reasoning:** Looks closed.\n",
    "Match the described proportions.",
    "```python\nSTUB:OK:BOX:2,1,1\n```",
    "1. Is it the right shape?\n2. Is it closed?",
    "1. **Q**\n   - **Answer:** Yes\n   - **Reasoning:** Fixed.\n"
    "2. **Q**\n   - **Answer:** Yes\n   - **Reasoning:** Still closed.\n",
]

with tempfile.TemporaryDirectory() as workdir:
    workdir = Path(workdir)

    # lay out a dataset: <root>/<id>/{prompt.txt, ground_truth.stl[, meta]}
    data = workdir / "dataset"
    for i in range(6):
        entry = data / f"part{i:02d}"
        entry.mkdir(parents=True)
        (entry / "prompt.txt").write_text(f"a rectangular part, variant {i}")
        (entry / "ground_truth.stl").write_bytes(
            write_stl(box_mesh(size=(1.0 + 0.5 * i, 1.0, 1.0))))
    entries = load_dataset(data)
    print(f"loaded {len(entries)} entries")

    configuration = RunConfiguration(model="offline", mode="zero_shot",
                                     mechanism="cadcodeverify")
    executor = ExecutorClient([sys.executable, "-m", "cadloop.testing.stub_runner"])

    def factory(config):
        gateway = ModelGateway(MockTransport({"*": REPLIES}), model_id=config.model)
        return Pipeline(gateway, executor,
                        settings=PipelineSettings(view_resolution=128, n_points=400),
                        artifact_root=workdir / "artifacts" / config.name)

    out = workdir / "results"
    traces = run_benchmark(entries, [configuration], factory, out, workers=2)
    executor.close()
    print(f"ran {len(traces)} episodes "
          f"({len(list((out / configuration.name).glob('*.json')))} trace files)")

    # a rerun resumes from the saved traces: zero new episodes
    def must_not_build(config):
        raise AssertionError("a full resume never constructs a pipeline")

    resumed = run_benchmark(entries, [configuration], must_not_build, out)
    print(f"resume check: {len(resumed)} traces loaded without re-running")

    strata = stratify(entries, compile_matrix={e.id: 6 - i for i, e in enumerate(entries)})
    report = aggregate(traces, strata)
    print("\n" + report.to_text())

    first = traces[0]
    print("one trace on disk, abridged:")
    payload = json.loads((out / configuration.name / f"{entries[0].id}.json").read_text())
    print(json.dumps({k: payload[k] for k in ("episode_id", "config")}, indent=2))

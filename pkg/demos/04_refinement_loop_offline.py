"""A complete refinement episode, fully offline.

The model is a scripted mock (canned replies) and the executor is the stub
runner, so the whole generate -> execute/repair -> verify -> refine loop runs
hermetically. Swap in gateway_from_config(...) with a real endpoint and the
real CAD runner for live use; nothing else changes.

Run:  python demos/04_refinement_loop_offline.py
"""

import sys
import tempfile
from pathlib import Path

from cadloop import (
    DatasetEntry, ExecutorClient, MockTransport, ModelGateway, Pipeline,
    PipelineSettings, box_mesh,
)


def fenced(code):
    return f"```python\n{code}\n```"


# The scripted conversation: generation compiles at once; the first
# verification finds a problem and refines; the second comes back all-Yes,
# which ends refinement early (the last object is carried forward).
replies = [
    fenced("STUB:OK"),                                   # generation
    "1. Is the object a bar twice as long as it is wide?\n"
    "2. Is the object solid?",                           # verification questions
    "1. **Is the object a bar twice as long as it is wide?**\n"
    "   - **Answer:** No\n"
    "   - **Reasoning:** All visible extents look equal.\n"
    "2. **Is the object solid?**\n"
    "   - **Answer:** Yes\n"
    "   - **Reasoning:** No openings are visible from any angle.\n",
    "Stretch the object along one axis until its length doubles its width.",
    fenced("STUB:OK:BOX:2,1,1"),                         # refined script
    "1. Is the object a bar twice as long as it is wide?\n"
    "2. Is the object solid?",
    "1. **Is the object a bar twice as long as it is wide?**\n"
    "   - **Answer:** Yes\n"
    "   - **Reasoning:** The long axis is now clearly doubled.\n"
    "2. **Is the object solid?**\n"
    "   - **Answer:** Yes\n"
    "   - **Reasoning:** Still closed everywhere.\n",
]

entry = DatasetEntry(id="demo-bar", description="a solid bar, twice as long as wide",
                     ground_truth_mesh=box_mesh(size=(2.0, 1.0, 1.0)))

with tempfile.TemporaryDirectory() as workdir:
    gateway = ModelGateway(MockTransport(replies), model_id="offline-demo")
    executor = ExecutorClient([sys.executable, "-m", "cadloop.testing.stub_runner"])
    pipeline = Pipeline(gateway, executor,
                        settings=PipelineSettings(view_resolution=128, n_points=500),
                        artifact_root=Path(workdir) / "artifacts")
    trace = pipeline.run_episode(entry, mechanism="cadcodeverify")
    executor.close()

    print(f"episode: {trace.episode_id}\n")
    for record in trace.stages:
        m = record.metrics
        carried = f" (carried from {record.carried_from})" if record.carried_from else ""
        print(f"  {record.stage:<10} compiled={m.compiled!s:<5} iogt={m.iogt:.4f} "
              f"pcd={m.pcd:.4f} hd={m.hausdorff:.4f}{carried}")
    best = trace.best_refine
    print(f"  best      pcd={best.pcd:.4f} (stage selection by minimal chamfer mean)")

    print("\nrequest log (kind/temperature/images):")
    for r in gateway.request_log:
        print(f"  {r.kind:<10} T={r.temperature}  images={r.image_count}")

    verification = trace.verifications[-1]
    print(f"\nfinal verification examined '{verification.examined_stage}': "
          f"{[a.verdict for a in verification.answers]} -> "
          f"{'stop (all yes)' if verification.feedback is None else 'refine again'}")

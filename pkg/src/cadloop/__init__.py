"""cadloop: generate, execute, verify and refine CAD scripting code.

The library turns a natural-language description into a parametric CAD
script through a chat/vision model, executes it in an external sandbox,
repairs compile failures from the compiler's error text, refines the result
through interchangeable feedback loops, and scores every stage against a
ground-truth mesh with exact geometry metrics.
"""

from .bench import (
    AggregateReport, DatasetEntry, RunConfiguration, StratumLabel, aggregate,
    load_dataset, run_benchmark, scan_dataset, stratify,
)
from .executor import CandidateScript, ExecutionResult, ExecutorClient
from .gateway import (
    Budget, ChatRequest, ChatResponse, FewShotExample, FewShotLibrary,
    HttpTransport, Message, MockTransport, ModelGateway, RetrySettings,
    TemperaturePolicy, extract_code, gateway_from_config,
)
from .mesh import (
    ComplexityScore, GeometricProperties, Mesh, box_mesh, cylinder_mesh,
    geometric_properties, mesh_complexity, parse_stl, write_stl,
)
from .metrics import (
    FAILURE_DISTANCE, MetricRecord, PointCloud, RigidTransform, dump_xyz,
    evaluate_pair, hausdorff_distance, icp_align, iogt, normalize_unit_cube,
    penalty_record, point_cloud_distance, sample_surface,
)
from .pipeline import (
    Answer, AnswerSet, Feedback, Pipeline, PipelineSettings, QuestionSet,
    RefinementTrace, select_best_refine,
)
from .prompts import PromptTemplate, TemplateName, render_prompt, template
from .views import RenderedView, ViewSet, render_views

__version__ = "0.1.0"

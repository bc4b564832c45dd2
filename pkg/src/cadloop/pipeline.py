"""The generate / execute+repair / refine state machine.

One episode runs: code generation from the description, a bounded
execute-repair loop driven by compiler error text, then M refinement rounds
under one of four interchangeable feedback mechanisms:

  cadcodeverify     render four views, generate yes/no verification
                    questions, answer them against the views, synthesize
                    feedback from the non-Yes answers (all-Yes stops early)
  premise           one view plus description plus code in a single prompt
  geometric_solver  compare the thirteen geometric properties of the
                    generated and ground-truth objects, verbalized by the
                    model (requires ground-truth access)
  hitl              a human picks the best view and writes the feedback

Every stage is scored against the ground truth; stages that never produced
an object carry the exact penalty record. All faults land in the trace; an
episode never raises for script- or model-level failures.
"""

from __future__ import annotations

import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    AnswerCountMismatch, CompileFailed, EmptyCompletion, EmptyMesh,
    EvaluationFailed, InputAborted, MalformedStl, NoQuestionsParsed,
    TransportError,
)
from .executor import CandidateScript, ExecutorClient
from .gateway import (
    KIND_ANSWERS, KIND_FEEDBACK, KIND_GENERATE, KIND_QUESTIONS, KIND_REFINE,
    KIND_REPAIR, KIND_VERBALIZE, FewShotLibrary, Message, ModelGateway,
    extract_code,
)
from .mesh import Mesh, geometric_properties, parse_stl
from .metrics import (
    MetricRecord, STAGE_BEST_REFINE, STAGE_GENERATED, evaluate_pair,
    penalty_record, refine_stage,
)
from .prompts import TemplateName, render_prompt, template
from .views import ViewSet, render_views

log = logging.getLogger(__name__)

MECHANISM_CADCODEVERIFY = "cadcodeverify"
MECHANISM_PREMISE = "premise"
MECHANISM_GEOMETRIC_SOLVER = "geometric_solver"
MECHANISM_HITL = "hitl"
MECHANISMS = (MECHANISM_CADCODEVERIFY, MECHANISM_PREMISE,
              MECHANISM_GEOMETRIC_SOLVER, MECHANISM_HITL)

VERDICT_YES = "yes"
VERDICT_NO = "no"
VERDICT_UNCLEAR = "unclear"

FEEDBACK_HUMAN = "human"

MODE_ZERO_SHOT = "zero_shot"
MODE_FEW_SHOT = "few_shot"


@dataclass(frozen=True)
class QuestionSet:
    questions: tuple[str, ...]

    def __post_init__(self):
        if not self.questions:
            raise NoQuestionsParsed("a question set needs at least one question")
        if not 2 <= len(self.questions) <= 5:
            log.warning("question count %d outside the expected 2-5 range",
                        len(self.questions))

    def __len__(self):
        return len(self.questions)

    def numbered_text(self):
        return "\n".join(f"{i}. {q}" for i, q in enumerate(self.questions, start=1))


@dataclass(frozen=True)
class Answer:
    verdict: str
    reasoning: str = ""

    def __post_init__(self):
        if self.verdict not in (VERDICT_YES, VERDICT_NO, VERDICT_UNCLEAR):
            raise ValueError(f"unknown verdict '{self.verdict}'")


@dataclass(frozen=True)
class AnswerSet:
    answers: tuple[Answer, ...]

    def __len__(self):
        return len(self.answers)

    def all_yes(self):
        return all(a.verdict == VERDICT_YES for a in self.answers)


@dataclass(frozen=True)
class Feedback:
    kind: str
    text: str
    source_qa: tuple[tuple[str, Answer], ...] | None = None

    def __post_init__(self):
        if self.kind == MECHANISM_CADCODEVERIFY and self.source_qa:
            if any(a.verdict == VERDICT_YES for _, a in self.source_qa):
                raise ValueError("verification feedback must not retain Yes-verdict pairs")


@dataclass
class StageRecord:
    """Everything recorded for one scored stage of an episode."""

    stage: str
    metrics: MetricRecord
    script: str | None = None
    status: str | None = None
    stl_path: str | None = None
    error_text: str | None = None
    duration: float = 0.0
    attempts: int = 0
    views: tuple[str, ...] = ()
    carried_from: str | None = None
    fault: str | None = None

    def to_dict(self):
        return {
            "stage": self.stage,
            "metrics": {
                "iogt": self.metrics.iogt, "pcd": self.metrics.pcd,
                "hausdorff": self.metrics.hausdorff,
                "compiled": self.metrics.compiled, "stage": self.metrics.stage,
            },
            "script": self.script,
            "status": self.status,
            "stl_path": self.stl_path,
            "error_text": self.error_text,
            "duration": self.duration,
            "attempts": self.attempts,
            "views": list(self.views),
            "carried_from": self.carried_from,
            "fault": self.fault,
        }


@dataclass
class VerificationRecord:
    """One feedback event: the examination of a stage's object and the
    ameliorative text it produced (None when every answer was Yes)."""

    mechanism: str
    examined_stage: str
    questions: tuple[str, ...] = ()
    answers: tuple[Answer, ...] = ()
    feedback: str | None = None
    details: str = ""

    def to_dict(self):
        return {
            "mechanism": self.mechanism,
            "examined_stage": self.examined_stage,
            "questions": list(self.questions),
            "answers": [{"verdict": a.verdict, "reasoning": a.reasoning} for a in self.answers],
            "feedback": self.feedback,
            "details": self.details,
        }


@dataclass
class RefinementTrace:
    """The full per-example episode record."""

    episode_id: str
    description: str
    config: dict
    stages: list[StageRecord] = field(default_factory=list)
    verifications: list[VerificationRecord] = field(default_factory=list)
    best_refine: MetricRecord | None = None

    def stage_record(self, stage):
        for record in self.stages:
            if record.stage == stage:
                return record
        raise KeyError(stage)

    def metric_records(self):
        records = [s.metrics for s in self.stages]
        if self.best_refine is not None:
            records.append(self.best_refine)
        return records

    def to_dict(self):
        best = None
        if self.best_refine is not None:
            best = {
                "iogt": self.best_refine.iogt, "pcd": self.best_refine.pcd,
                "hausdorff": self.best_refine.hausdorff,
                "compiled": self.best_refine.compiled, "stage": self.best_refine.stage,
            }
        return {
            "episode_id": self.episode_id,
            "description": self.description,
            "config": self.config,
            "stages": [s.to_dict() for s in self.stages],
            "verifications": [v.to_dict() for v in self.verifications],
            "best_refine": best,
        }

    def fingerprint(self) -> str:
        """Canonical JSON with wall-clock durations stripped, for comparing
        two runs of the same configuration."""
        return json.dumps(_strip_durations(self.to_dict()), sort_keys=True)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True),
                        encoding="utf-8")

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        stages = []
        for s in data["stages"]:
            m = s["metrics"]
            stages.append(StageRecord(
                stage=s["stage"],
                metrics=MetricRecord(iogt=m["iogt"], pcd=m["pcd"],
                                     hausdorff=m["hausdorff"], compiled=m["compiled"],
                                     stage=m["stage"]),
                script=s.get("script"), status=s.get("status"),
                stl_path=s.get("stl_path"), error_text=s.get("error_text"),
                duration=s.get("duration", 0.0), attempts=s.get("attempts", 0),
                views=tuple(s.get("views", ())), carried_from=s.get("carried_from"),
                fault=s.get("fault"),
            ))
        verifications = [
            VerificationRecord(
                mechanism=v["mechanism"], examined_stage=v["examined_stage"],
                questions=tuple(v.get("questions", ())),
                answers=tuple(Answer(a["verdict"], a.get("reasoning", ""))
                              for a in v.get("answers", ())),
                feedback=v.get("feedback"), details=v.get("details", ""),
            )
            for v in data.get("verifications", ())
        ]
        best = None
        if data.get("best_refine"):
            b = data["best_refine"]
            best = MetricRecord(iogt=b["iogt"], pcd=b["pcd"], hausdorff=b["hausdorff"],
                                compiled=b["compiled"], stage=b["stage"])
        return cls(episode_id=data["episode_id"], description=data["description"],
                   config=data["config"], stages=stages, verifications=verifications,
                   best_refine=best)


def _strip_durations(value):
    if isinstance(value, dict):
        return {k: _strip_durations(v) for k, v in value.items() if k != "duration"}
    if isinstance(value, list):
        return [_strip_durations(v) for v in value]
    return value


# -- reply parsing ---------------------------------------------------------------

_QUESTION_LINE = re.compile(r"^\s*\d+\s*[\.\-\)]\s*(\S.*?)\s*$")
_ANSWER_TOKEN = re.compile(
    r"\*\*\s*Answer:?\s*\*\*:?[\s*_\"'“]*([A-Za-z]+)", re.IGNORECASE)
_REASONING_TOKEN = re.compile(
    r"\*\*\s*Reasoning:?\s*\*\*:?\s*(.*?)(?=\n\s*\d+\s*[\.\)]|\n\s*-?\s*\*\*|\Z)",
    re.IGNORECASE | re.DOTALL)


def parse_questions(reply: str) -> list[str]:
    questions = []
    for line in reply.splitlines():
        match = _QUESTION_LINE.match(line)
        if match:
            questions.append(match.group(1))
    return questions


def parse_answers(reply: str) -> list[Answer]:
    """Parse the **Answer:**/**Reasoning:** reply structure; an
    unrecognizable verdict token degrades to Unclear."""
    answers = []
    matches = list(_ANSWER_TOKEN.finditer(reply))
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(reply)
        verdict = match.group(1).lower()
        if verdict not in (VERDICT_YES, VERDICT_NO, VERDICT_UNCLEAR):
            verdict = VERDICT_UNCLEAR
        reasoning_match = _REASONING_TOKEN.search(reply, match.end(), end)
        reasoning = reasoning_match.group(1).strip() if reasoning_match else ""
        answers.append(Answer(verdict=verdict, reasoning=reasoning))
    return answers


def format_qa_pairs(pairs) -> str:
    lines = []
    for i, (question, answer) in enumerate(pairs, start=1):
        lines.append(f"{i}. Question: {question}")
        lines.append(f"   Answer: {answer.verdict.capitalize()}")
        if answer.reasoning:
            lines.append(f"   Reasoning: {answer.reasoning}")
    return "\n".join(lines)


def format_property_comparison(generated_props, ground_truth_props) -> str:
    """The thirteen category pairs side-by-side, generated vs ground truth."""
    lines = [f"{'category':<18} {'generated':>14} {'ground_truth':>14}"]
    for (name, g_value), (_, t_value) in zip(generated_props.as_pairs(),
                                             ground_truth_props.as_pairs()):
        lines.append(f"{name:<18} {g_value:>14.6g} {t_value:>14.6g}")
    return "\n".join(lines)


_VERBALIZE_PREAMBLE = (
    "The table below compares thirteen geometric properties of a generated 3D "
    "object against the ground-truth object it should match. Verbalize the "
    "differences as short, actionable modeling feedback for correcting the "
    "generated object.\n\n")


# -- pipeline settings -------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSettings:
    repair_budget: int = 3          # N: total executions per repair loop
    refinement_budget: int = 2      # M: refinement rounds per episode
    mode: str = MODE_ZERO_SHOT
    few_shot_k: int = 5
    n_points: int = 1000
    seed: int = 0
    view_resolution: int = 512
    timeout_s: float = 60.0
    attach_images: bool = True      # False = the no-image refinement ablation
    premise_view_angle: int = 0

    def __post_init__(self):
        if self.repair_budget < 1:
            raise ValueError("repair budget must be >= 1")
        if self.mode not in (MODE_ZERO_SHOT, MODE_FEW_SHOT):
            raise ValueError(f"unknown mode '{self.mode}'")


class Pipeline:
    """Pipeline operations bound to a gateway, an executor, and settings."""

    def __init__(self, gateway: ModelGateway, executor: ExecutorClient,
                 settings: PipelineSettings | None = None,
                 library: FewShotLibrary | None = None,
                 artifact_root="artifacts", hitl_input=None, hitl_output=None):
        self.gateway = gateway
        self.executor = executor
        self.settings = settings or PipelineSettings()
        self.library = library
        self.artifact_root = Path(artifact_root)
        self.hitl_input = hitl_input if hitl_input is not None else sys.stdin
        self.hitl_output = hitl_output if hitl_output is not None else sys.stdout
        if self.settings.mode == MODE_FEW_SHOT and library is None:
            raise ValueError("few-shot mode requires an example library")

    # -- model-facing operations ---------------------------------------------------

    def generate_code(self, description: str, episode_id: str = "") -> CandidateScript:
        """One generation call at the policy temperature; the reply's first
        fenced block (or the whole reply) becomes the candidate script."""
        if not description.strip():
            raise ValueError("description is empty")
        if self.settings.mode == MODE_FEW_SHOT:
            examples = self.library.prompt_block(self.settings.few_shot_k)
        else:
            examples = ""
        prompt = render_prompt(template(TemplateName.GENERATE),
                               {"examples": examples, "description": description})
        reply = self.gateway.complete(KIND_GENERATE, [Message("user", prompt)],
                                      episode_id=episode_id)
        code = extract_code(reply.text)
        if not code.strip():
            raise EmptyCompletion("generation reply contained no code")
        return CandidateScript(code=code, stage=STAGE_GENERATED, episode_id=episode_id)

    def repair_until_compiles(self, script: CandidateScript, max_iters: int | None = None,
                              stage_label: str | None = None, episode_dir=None):
        """Execute; on failure, feed the compiler error back through the
        repair prompt (temperature 1) and retry, up to ``max_iters`` total
        executions. Returns (script, result, attempts) or raises
        CompileFailed carrying the last error."""
        budget = max_iters if max_iters is not None else self.settings.repair_budget
        if budget < 1:
            raise ValueError("repair budget must be >= 1")
        stage_label = stage_label or script.stage
        episode_dir = Path(episode_dir) if episode_dir else self._episode_dir(script.episode_id)
        current = script
        for attempt in range(1, budget + 1):
            self._save_script(episode_dir, f"{stage_label}_try{attempt}", current.code)
            stl_out = episode_dir / "stl" / f"{stage_label}_try{attempt}.stl"
            result = self.executor.execute_candidate(current, timeout_s=self.settings.timeout_s,
                                                     stl_out=stl_out)
            if result.ok:
                return current, result, attempt
            if attempt == budget:
                raise CompileFailed(current, result, attempt)
            error_text = result.error_text or f"execution failed with status {result.status}"
            prompt = render_prompt(template(TemplateName.REPAIR),
                                   {"error": error_text, "code": current.code})
            reply = self.gateway.complete(KIND_REPAIR, [Message("user", prompt)],
                                          episode_id=script.episode_id)
            code = extract_code(reply.text)
            if not code.strip():
                raise EmptyCompletion("repair reply contained no code")
            current = CandidateScript(code=code, stage=f"{stage_label}_repair{attempt}",
                                      episode_id=script.episode_id)
        raise AssertionError("unreachable")  # pragma: no cover

    def generate_questions(self, description: str, episode_id: str = "") -> QuestionSet:
        prompt = render_prompt(template(TemplateName.QUESTION_GEN),
                               {"description": description})
        reply = self.gateway.complete(KIND_QUESTIONS, [Message("user", prompt)],
                                      episode_id=episode_id)
        questions = parse_questions(reply.text)
        if not questions:
            raise NoQuestionsParsed(f"no numbered questions in reply: {reply.text[:120]!r}")
        return QuestionSet(tuple(questions))

    def answer_questions(self, description: str, questions: QuestionSet,
                         views: ViewSet, episode_id: str = "") -> AnswerSet:
        prompt = render_prompt(template(TemplateName.ANSWER_GEN),
                               {"description": description,
                                "questions": questions.numbered_text()})
        images = tuple(view.png_bytes() for view in views)
        reply = self.gateway.complete(KIND_ANSWERS,
                                      [Message("user", prompt, images=images)],
                                      episode_id=episode_id)
        answers = parse_answers(reply.text)
        if len(answers) != len(questions):
            raise AnswerCountMismatch(len(questions), len(answers))
        return AnswerSet(tuple(answers))

    def synthesize_feedback(self, questions: QuestionSet, answers: AnswerSet,
                            episode_id: str = "") -> Feedback | None:
        """None when every answer is Yes (no refinement necessary); otherwise
        the feedback call sees only the non-Yes question/answer pairs."""
        if len(questions) != len(answers):
            raise AnswerCountMismatch(len(questions), len(answers))
        if answers.all_yes():
            return None
        retained = tuple(
            (q, a) for q, a in zip(questions.questions, answers.answers)
            if a.verdict != VERDICT_YES)
        prompt = render_prompt(template(TemplateName.FEEDBACK_GEN),
                               {"qa_pairs": format_qa_pairs(retained)})
        reply = self.gateway.complete(KIND_FEEDBACK, [Message("user", prompt)],
                                      episode_id=episode_id)
        return Feedback(kind=MECHANISM_CADCODEVERIFY, text=reply.text, source_qa=retained)

    def refine_once(self, description: str, current: CandidateScript, feedback: Feedback,
                    views: ViewSet | None, max_iters: int | None = None,
                    stage_label: str = "refine1", images=None):
        """One refinement call (description + code + feedback + the four
        views unless the no-image ablation is on), then the repair loop."""
        prompt = render_prompt(template(TemplateName.REFINE),
                               {"description": description, "code": current.code,
                                "feedback": feedback.text})
        if images is None:
            images = tuple(v.png_bytes() for v in views) if (
                views is not None and self.settings.attach_images) else ()
        reply = self.gateway.complete(KIND_REFINE, [Message("user", prompt, images=images)],
                                      episode_id=current.episode_id)
        code = extract_code(reply.text)
        if not code.strip():
            raise EmptyCompletion("refinement reply contained no code")
        refined = CandidateScript(code=code, stage=stage_label,
                                  episode_id=current.episode_id)
        script, result, attempts = self.repair_until_compiles(refined, max_iters,
                                                              stage_label=stage_label)
        return script, result, attempts

    def premise_refine(self, description: str, current: CandidateScript,
                       view, max_iters: int | None = None, stage_label: str = "refine1"):
        """Single-prompt baseline: one image plus description plus code."""
        prompt = render_prompt(template(TemplateName.PREMISE_REFINE),
                               {"description": description, "code": current.code})
        reply = self.gateway.complete(
            KIND_REFINE, [Message("user", prompt, images=(view.png_bytes(),))],
            episode_id=current.episode_id)
        code = extract_code(reply.text)
        if not code.strip():
            raise EmptyCompletion("refinement reply contained no code")
        refined = CandidateScript(code=code, stage=stage_label,
                                  episode_id=current.episode_id)
        return self.repair_until_compiles(refined, max_iters, stage_label=stage_label)

    def geometric_solver_feedback(self, generated: Mesh, ground_truth: Mesh,
                                  episode_id: str = "") -> Feedback:
        """Thirteen-category comparison of both objects, verbalized by the
        model. This baseline requires ground-truth access."""
        table = format_property_comparison(geometric_properties(generated),
                                           geometric_properties(ground_truth))
        reply = self.gateway.complete(
            KIND_VERBALIZE, [Message("user", _VERBALIZE_PREAMBLE + table)],
            episode_id=episode_id)
        return Feedback(kind=MECHANISM_GEOMETRIC_SOLVER, text=reply.text)

    def hitl_refine(self, description: str, current: CandidateScript, views: ViewSet,
                    max_iters: int | None = None, stage_label: str = "refine1",
                    view_paths=None):
        """Interactive baseline: display the four view paths, read an image
        choice (1-4, reprompting on bad input) and one feedback line."""
        if view_paths is None:
            view_paths = views.save(self._episode_dir(current.episode_id) / "views",
                                    label=stage_label + "_hitl")
        choice = self._prompt_choice(view_paths)
        feedback_text = self._prompt_line("Feedback: ")
        feedback = Feedback(kind=FEEDBACK_HUMAN, text=feedback_text)
        chosen = views.views[choice - 1]
        prompt = render_prompt(template(TemplateName.REFINE),
                               {"description": description, "code": current.code,
                                "feedback": feedback.text})
        reply = self.gateway.complete(
            KIND_REFINE, [Message("user", prompt, images=(chosen.png_bytes(),))],
            episode_id=current.episode_id)
        code = extract_code(reply.text)
        if not code.strip():
            raise EmptyCompletion("refinement reply contained no code")
        refined = CandidateScript(code=code, stage=stage_label,
                                  episode_id=current.episode_id)
        script, result, attempts = self.repair_until_compiles(refined, max_iters,
                                                              stage_label=stage_label)
        return script, result, attempts, feedback, chosen.angle

    def _prompt_choice(self, view_paths):
        out = self.hitl_output
        out.write("Select the image with the best viewing angle:\n")
        for i, path in enumerate(view_paths, start=1):
            out.write(f"  {i}. {path}\n")
        while True:
            out.write("Choice [1-4]: ")
            out.flush()
            line = self.hitl_input.readline()
            if line == "":
                raise InputAborted("end of input while selecting a view")
            try:
                choice = int(line.strip())
            except ValueError:
                choice = -1
            if 1 <= choice <= 4:
                return choice
            out.write("Please enter a number between 1 and 4.\n")

    def _prompt_line(self, label):
        self.hitl_output.write(label)
        self.hitl_output.flush()
        line = self.hitl_input.readline()
        if line == "":
            raise InputAborted("end of input while reading feedback")
        return line.strip()

    # -- episode orchestration -------------------------------------------------------

    def run_episode(self, entry, mechanism: str = MECHANISM_CADCODEVERIFY,
                    episode_id: str | None = None, config_name: str = "") -> RefinementTrace:
        """Generate, repair, evaluate, then M feedback-driven refinement
        rounds; every fault is recorded in the trace rather than raised."""
        if mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism '{mechanism}'")
        episode_id = episode_id or getattr(entry, "id", "") or "episode"
        episode_dir = self._episode_dir(episode_id)
        settings = self.settings
        trace = RefinementTrace(
            episode_id=episode_id,
            description=entry.description,
            config={
                "name": config_name or mechanism,
                "mechanism": mechanism,
                "mode": settings.mode,
                "model_id": self.gateway.model_id,
                "repair_budget": settings.repair_budget,
                "refinement_budget": settings.refinement_budget,
                "few_shot_k": settings.few_shot_k if settings.mode == MODE_FEW_SHOT else 0,
                "n_points": settings.n_points,
                "seed": settings.seed,
                "view_resolution": settings.view_resolution,
                "attach_images": settings.attach_images,
                "temperatures": self.gateway.policy.snapshot(),
            },
        )
        ground_truth = entry.ground_truth_mesh

        # Stage 1+2: generation and the execute/repair loop.
        last_script = None
        last_good = None  # (script, mesh, stl_path) of the newest compiled object
        record = StageRecord(stage=STAGE_GENERATED, metrics=penalty_record(STAGE_GENERATED))
        try:
            script = self.generate_code(entry.description, episode_id)
            last_script = script
            script, result, attempts = self.repair_until_compiles(
                script, stage_label=STAGE_GENERATED, episode_dir=episode_dir)
            last_script = script
            record, mesh = self._scored_record(STAGE_GENERATED, script, result, attempts,
                                               ground_truth, episode_dir)
            if mesh is not None:
                last_good = (script, mesh, result.stl_path)
        except CompileFailed as fault:
            last_script = fault.script
            record = self._failed_record(STAGE_GENERATED, fault.script, fault.last_result,
                                         fault.attempts, episode_dir)
        except (EmptyCompletion, TransportError, MalformedStl) as fault:
            record.fault = f"{type(fault).__name__}: {fault}"
        trace.stages.append(record)

        # Stage 3: M refinement rounds under the chosen mechanism.
        stopped = False
        for round_index in range(1, settings.refinement_budget + 1):
            stage = refine_stage(round_index)
            previous = trace.stages[-1]
            if stopped:
                trace.stages.append(self._carried_record(stage, previous))
                continue
            if last_good is None:
                record, last_script, last_good = self._recovery_round(
                    stage, last_script, ground_truth, episode_dir, previous)
                trace.stages.append(record)
                continue
            current_script, current_mesh, _ = last_good
            try:
                views = render_views(current_mesh, settings.view_resolution)
                view_paths = views.save(episode_dir / "views", label=stage + "_input")
                rel_views = tuple(self._relative(episode_dir, p) for p in view_paths)
                outcome = self._mechanism_round(
                    mechanism, entry, trace, stage, previous, current_script,
                    current_mesh, ground_truth, views, view_paths, episode_id)
                if outcome is None:  # all-Yes: no further refinement necessary
                    stopped = True
                    carried = self._carried_record(stage, previous)
                    carried.views = rel_views
                    trace.stages.append(carried)
                    continue
                script, result, attempts = outcome
                record, mesh = self._scored_record(stage, script, result, attempts,
                                                   ground_truth, episode_dir)
                record.views = rel_views
                if mesh is not None:
                    last_good = (script, mesh, result.stl_path)
                last_script = script
            except CompileFailed as fault:
                record = self._failed_record(stage, fault.script, fault.last_result,
                                             fault.attempts, episode_dir)
                last_script = fault.script
            except (EmptyCompletion, TransportError, NoQuestionsParsed,
                    AnswerCountMismatch, MalformedStl, InputAborted) as fault:
                record = StageRecord(stage=stage, metrics=penalty_record(stage),
                                     fault=f"{type(fault).__name__}: {fault}")
            trace.stages.append(record)

        trace.best_refine = select_best_refine(trace)
        trace.save(episode_dir / "trace.json")
        return trace

    def _mechanism_round(self, mechanism, entry, trace, stage, previous,
                         current_script, current_mesh, ground_truth, views,
                         view_paths, episode_id):
        """Produce feedback for the current object and refine; None signals
        the all-Yes early stop."""
        if mechanism == MECHANISM_CADCODEVERIFY:
            questions = self.generate_questions(entry.description, episode_id)
            answers = self.answer_questions(entry.description, questions, views, episode_id)
            feedback = self.synthesize_feedback(questions, answers, episode_id)
            trace.verifications.append(VerificationRecord(
                mechanism=mechanism, examined_stage=previous.stage,
                questions=questions.questions, answers=answers.answers,
                feedback=feedback.text if feedback else None))
            if feedback is None:
                return None
            return self.refine_once(entry.description, current_script, feedback,
                                    views, stage_label=stage)
        if mechanism == MECHANISM_PREMISE:
            view = views.view(self.settings.premise_view_angle)
            trace.verifications.append(VerificationRecord(
                mechanism=mechanism, examined_stage=previous.stage,
                details=f"view_angle={view.angle}"))
            return self.premise_refine(entry.description, current_script, view,
                                       stage_label=stage)
        if mechanism == MECHANISM_GEOMETRIC_SOLVER:
            feedback = self.geometric_solver_feedback(current_mesh, ground_truth, episode_id)
            trace.verifications.append(VerificationRecord(
                mechanism=mechanism, examined_stage=previous.stage,
                feedback=feedback.text,
                details=format_property_comparison(
                    geometric_properties(current_mesh),
                    geometric_properties(ground_truth))))
            return self.refine_once(entry.description, current_script, feedback,
                                    views, stage_label=stage)
        script, result, attempts, feedback, angle = self.hitl_refine(
            entry.description, current_script, views, stage_label=stage,
            view_paths=view_paths)
        trace.verifications.append(VerificationRecord(
            mechanism=mechanism, examined_stage=previous.stage,
            feedback=feedback.text, details=f"chosen_angle={angle}"))
        return script, result, attempts

    def _recovery_round(self, stage, last_script, ground_truth, episode_dir, previous):
        """No compiled object exists yet: spend the round on another repair
        pass over the last code instead of feedback the mechanism cannot
        give without an object."""
        if last_script is None:
            record = self._carried_record(stage, previous)
            return record, None, None
        retry = CandidateScript(code=last_script.code, stage=stage,
                                episode_id=last_script.episode_id)
        try:
            script, result, attempts = self.repair_until_compiles(
                retry, stage_label=stage, episode_dir=episode_dir)
        except CompileFailed as fault:
            return (self._failed_record(stage, fault.script, fault.last_result,
                                        fault.attempts, episode_dir),
                    fault.script, None)
        except (EmptyCompletion, TransportError) as fault:
            record = StageRecord(stage=stage, metrics=penalty_record(stage),
                                 fault=f"{type(fault).__name__}: {fault}")
            return record, last_script, None
        record, mesh = self._scored_record(stage, script, result, attempts,
                                           ground_truth, episode_dir)
        good = (script, mesh, result.stl_path) if mesh is not None else None
        return record, script, good

    # -- helpers ---------------------------------------------------------------------

    def _episode_dir(self, episode_id):
        directory = self.artifact_root / (episode_id or "adhoc")
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    @staticmethod
    def _relative(episode_dir, path):
        try:
            return str(Path(path).relative_to(episode_dir))
        except ValueError:
            return str(path)

    @staticmethod
    def _save_script(episode_dir, label, code):
        scripts = episode_dir / "scripts"
        scripts.mkdir(parents=True, exist_ok=True)
        (scripts / f"{label}.py").write_text(code, encoding="utf-8")

    @staticmethod
    def _load_mesh(result):
        with open(result.stl_path, "rb") as handle:
            return parse_stl(handle.read())

    def _scored_record(self, stage, script, result, attempts, ground_truth, episode_dir):
        """Score one executed stage; returns (record, mesh or None)."""
        mesh = None
        fault = None
        if result.ok:
            try:
                mesh = self._load_mesh(result)
            except (MalformedStl, EmptyMesh) as exc:
                fault = f"unusable STL artifact: {exc}"
        try:
            metrics = evaluate_pair(mesh, ground_truth, n=self.settings.n_points,
                                    seed=self.settings.seed, stage=stage)
        except EvaluationFailed as exc:
            metrics = penalty_record(stage)
            fault = f"EvaluationFailed: {exc}"
            mesh = None
        record = StageRecord(
            stage=stage, metrics=metrics, script=script.code,
            status=result.status,
            stl_path=self._relative(episode_dir, result.stl_path) if result.stl_path else None,
            error_text=result.error_text, duration=result.duration,
            attempts=attempts, fault=fault)
        return record, mesh if metrics.compiled else None

    def _failed_record(self, stage, script, result, attempts, episode_dir):
        return StageRecord(
            stage=stage, metrics=penalty_record(stage),
            script=script.code if script else None,
            status=result.status, stl_path=None, error_text=result.error_text,
            duration=result.duration, attempts=attempts)

    @staticmethod
    def _carried_record(stage, previous: StageRecord) -> StageRecord:
        return StageRecord(
            stage=stage, metrics=previous.metrics.retagged(stage),
            script=previous.script, status=previous.status,
            stl_path=previous.stl_path, error_text=previous.error_text,
            attempts=0, carried_from=previous.carried_from or previous.stage)


def select_best_refine(trace: RefinementTrace) -> MetricRecord:
    """Among compiled refinement stages, the one with minimal point-cloud
    distance (earlier stage wins ties); the penalty record when none
    compiled."""
    refinements = [s for s in trace.stages if s.stage.startswith("refine")]
    if not refinements:
        raise ValueError("trace has no refinement stages")
    compiled = [s for s in refinements if s.metrics.compiled]
    if not compiled:
        return penalty_record(STAGE_BEST_REFINE)
    best = min(compiled, key=lambda s: s.metrics.pcd)
    return best.metrics.retagged(STAGE_BEST_REFINE)

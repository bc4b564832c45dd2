"""Prompt templates used by the refinement pipeline.

Placeholders are ``{name}`` spans substituted verbatim by render_prompt;
everything else is fixed text. The question-generation, answering, feedback
and repair bodies carry their full fixed instruction blocks (including the
two in-template example descriptions for question generation), since the
downstream parsers rely on the exact response format they demand.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .errors import MissingPlaceholder

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class TemplateName(str, Enum):
    GENERATE = "generate"
    REPAIR = "repair"
    QUESTION_GEN = "question_gen"
    ANSWER_GEN = "answer_gen"
    FEEDBACK_GEN = "feedback_gen"
    PREMISE_REFINE = "premise_refine"
    REFINE = "refine"


@dataclass(frozen=True)
class PromptTemplate:
    name: TemplateName
    body: str

    def placeholders(self):
        return set(_PLACEHOLDER.findall(self.body))


def render_prompt(template: PromptTemplate, bindings: dict) -> str:
    """Substitute every ``{name}`` span; fixed text is preserved byte-for-byte.

    Substitution is single-pass, so braces inside substituted values are left
    alone. Raises MissingPlaceholder when a binding is absent.
    """

    def replace(match):
        key = match.group(1)
        if key not in bindings:
            raise MissingPlaceholder(f"no binding for {{{key}}} in template '{template.name.value}'")
        return str(bindings[key])

    return _PLACEHOLDER.sub(replace, template.body)


_GENERATE_BODY = """\
You are an expert in CADQuery, a Python-based parametric CAD scripting language.
Write Python code using CADQuery that creates the 3D object described below and exports it to an STL file named "Generated.stl".
Respond with a single Python code block and nothing else outside it.
{examples}Description:
{description}
"""

_FEW_SHOT_HEADER = (
    "Here are example CADQuery scripts to reference while writing your code.\n\n"
)

_REPAIR_BODY = """\
You will be provided with a piece of Python code and a compiler error message, and then your task will be to fix the bugs and rewrite the code.


#### Compiler error messages:
{error}

#### Python Code:
{code}
"""

_QUESTION_GEN_BODY = """\
You will be given a description of how a human-designer would describe the design of a 3D object. Your job is to provide between 2-5 (Yes or No) questions that I can use to verify how similar the generated object is to the description generated by a human. The questions should be framed such that answering “No” implies that there is a change that needs to be made to the object regarding the verification question.
Here are some important points to note for this task;

(1) Do not make up questions if you cannot generate 5 questions based on the description provided.
(2) Ensure that your questions only reference entities mentioned within the description.
(3) Try not to reference orientation the components of the 3D object. Your generated questions should not ask whether a component is on the "right" or "left" side as this orientation is relative.
I will give you two examples with a language description followed by the appropriate verification questions. Please reference these examples while generating your verification questions.

### Example 1 ###

Description:
Extrude a cylindrical plate with a rectangular hole in the middle of it.

Generated Questions:
1. Is the object cylindrical in shape?
  2. Does the object have a rectangular hole in the center?
  3. Is the object extruded in one dimension?

### Example 2 ###
Description:
Design a 3D object that resembles a cone. First draw a sketch of a square and extrude it to create the base of the cone. Next, draw a sketch of a circle centered at the center of the square base. Extrude this sketch vertically into a conical shape, such that the diameter of the circle decreases as the height increases. Finally cutout the tip of the cone, such that the tip of the cone is now rectangular in shape.

Generated Questions:
1- Does the object resemble a cone?
2- Is the base of the object square-shaped?
3- Is the circular base of the cone centered at the same point as the center of the square base?
4- Is the tip of the cone rectangular?
5- Does the diameter of the cone decrease as the height increases?

### Task ###

Description:
{description}

Generated Questions:
"""

_ANSWER_GEN_BODY = """\
Your job is to answer this set of questions with respect to the object I have shared with you. I will be providing 4 images of the object from different orientations so that you can get a complete picture of the 3D object. Here are some important points to note regarding your task:
(1) Remember that these images are all of the same object from different angles.
(2) The answer to each of these questions should always be one of three options which are “Yes” or “No” or “Unclear.”
(3) Your answer should be “Unclear” in situations where you are unsure of the answer or do not have enough information to answer the question.
Make sure to provide reasoning supporting all your answers.

# Your answer should follow the same format as below:
1. **Question?**
   - **Answer:**
   - **Reasoning:**

2. **Question?**
   - **Answer:**
   - **Reasoning:**

Description:
{description}

Questions:
{questions}
"""

_FEEDBACK_GEN_BODY = """\
{qa_pairs}

These were the answers to the questions I asked to validate a generated 3D object. Can you utilize the answers to these questions to generate actionable feedback that will help the model to correct the mistakes in the 3D object? Your job is to summarize these answers into practical corrections that need to be made to the 3D object. Please note the following while generating your feedback:
(1) The corrections should be such that the answers to all questions provided will become yes upon applying the suggested corrections.
(2) Your corrections should not change the object such that any of the answers that are already, "Yes" become "No."
(3) You only want to change the object such that the answers which are "No" or "Unclear" become "Yes." The summary should be specific and only a few sentences long.
(4) Your corrections should not be regarding the quality or orientation of the images.
(5) Your feedback should not attempt to fix issues in the scale. DO NOT ask for the addition of additional scale or reference objects.
(6) Do not ask for details regarding the size or dimensions of the object.
(7) Your corrections should be constructed such that a human designer can use your feedback to update the 3D object such that all questions have "Yes" as the answer.
"""

_REFINE_BODY = """\
The CADQuery script below was written to produce the 3D object described. Attached are reference images of the object the script currently produces, captured at yaw angles of 0, 90, 180 and 270 degrees. Apply the feedback to correct the script.
Respond with the complete corrected Python code in a single code block, and keep the STL export.

Description:
{description}

Current code:
{code}

Feedback:
{feedback}
"""

_PREMISE_REFINE_BODY = """\
Attached is an image of the 3D object produced by the CADQuery script below. Compare the object against the description and correct any discrepancy in the script.
Respond with the complete corrected Python code in a single code block, and keep the STL export.

Description:
{description}

Current code:
{code}
"""

TEMPLATES = {
    TemplateName.GENERATE: PromptTemplate(TemplateName.GENERATE, _GENERATE_BODY),
    TemplateName.REPAIR: PromptTemplate(TemplateName.REPAIR, _REPAIR_BODY),
    TemplateName.QUESTION_GEN: PromptTemplate(TemplateName.QUESTION_GEN, _QUESTION_GEN_BODY),
    TemplateName.ANSWER_GEN: PromptTemplate(TemplateName.ANSWER_GEN, _ANSWER_GEN_BODY),
    TemplateName.FEEDBACK_GEN: PromptTemplate(TemplateName.FEEDBACK_GEN, _FEEDBACK_GEN_BODY),
    TemplateName.REFINE: PromptTemplate(TemplateName.REFINE, _REFINE_BODY),
    TemplateName.PREMISE_REFINE: PromptTemplate(TemplateName.PREMISE_REFINE, _PREMISE_REFINE_BODY),
}


def template(name: TemplateName) -> PromptTemplate:
    return TEMPLATES[name]

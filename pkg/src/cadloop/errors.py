"""Exception taxonomy shared across the package."""


class CadLoopError(Exception):
    """Base class for all cadloop errors."""


# -- mesh ------------------------------------------------------------------

class MalformedStl(CadLoopError):
    """STL bytes that cannot be decoded (truncation, count mismatch, bad grammar)."""


class EmptyMesh(CadLoopError):
    """A mesh with zero triangles where at least one is required."""


# -- metrics ---------------------------------------------------------------

class ZeroAreaMesh(CadLoopError):
    """Surface sampling requested on a mesh whose total area is zero."""


class DegenerateCloud(CadLoopError):
    """A point cloud with zero extent (or a zero-volume reference box)."""


class EmptyCloud(CadLoopError):
    """A distance metric called with an empty point cloud."""


class EvaluationFailed(CadLoopError):
    """A metric pipeline step failed for a pair that should have been scorable."""


# -- model gateway ---------------------------------------------------------

class MissingPlaceholder(CadLoopError):
    """A prompt template placeholder had no binding."""


class TransportError(CadLoopError):
    """The chat transport failed after exhausting retries."""


class ScriptExhausted(TransportError):
    """The scripted mock transport ran out of canned replies."""


class BudgetExceeded(CadLoopError):
    """The configured request or token budget would be exceeded."""


# -- executor --------------------------------------------------------------

class RunnerUnavailable(CadLoopError):
    """The configured runner executable could not be started."""


# -- pipeline --------------------------------------------------------------

class EmptyCompletion(CadLoopError):
    """The model reply contained no usable code."""


class NoQuestionsParsed(CadLoopError):
    """No numbered questions could be parsed from the model reply."""


class AnswerCountMismatch(CadLoopError):
    """Parsed answer count differs from the question count."""

    def __init__(self, expected, got):
        super().__init__(f"expected {expected} answers, parsed {got}")
        self.expected = expected
        self.got = got


class CompileFailed(CadLoopError):
    """The repair loop exhausted its budget without a successful execution."""

    def __init__(self, script, last_result, attempts):
        error = last_result.error_text or last_result.status
        super().__init__(f"no compile after {attempts} attempts: {error}")
        self.script = script
        self.last_result = last_result
        self.attempts = attempts


class InputAborted(CadLoopError):
    """Interactive input ended before the session could finish."""


# -- bench -----------------------------------------------------------------

class MissingPrompt(CadLoopError):
    """A dataset entry directory without a prompt file."""


class MissingGroundTruth(CadLoopError):
    """A dataset entry directory without a ground-truth STL."""


class EmptyDataset(CadLoopError):
    """A dataset root yielding no loadable entries."""


class EmptyInput(CadLoopError):
    """Aggregation called with nothing to aggregate."""

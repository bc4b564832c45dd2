"""Client for the external CAD script runner.

Wire protocol (UTF-8, one JSON object per line):
  request  {"id", "code", "timeout_s", "stl_out"}
  response {"id", "status": "ok"|"compile_error"|"timeout"|"crash",
            "stl_path"?, "error"?, "duration_s"}

The runner enforces the script timeout itself and reports it in-band; the
client additionally kills an unresponsive runner at twice the timeout as a
backstop. Runner processes can be long-lived (pooled) or spawned per call.
"""

from __future__ import annotations

import json
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import RunnerUnavailable

STATUS_OK = "ok"
STATUS_COMPILE_ERROR = "compile_error"
STATUS_TIMEOUT = "timeout"
STATUS_CRASH = "crash"
_STATUSES = (STATUS_OK, STATUS_COMPILE_ERROR, STATUS_TIMEOUT, STATUS_CRASH)

STAGE_LABEL_GENERATED = "generated"


@dataclass(frozen=True)
class CandidateScript:
    """One candidate CAD script heading for execution."""

    code: str
    stage: str = STAGE_LABEL_GENERATED
    episode_id: str = ""

    def __post_init__(self):
        if not self.code.strip():
            raise ValueError("candidate script code is empty")


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    stl_path: str | None = None
    error_text: str | None = None
    duration: float = 0.0

    def __post_init__(self):
        if self.status not in _STATUSES:
            raise ValueError(f"unknown status '{self.status}'")
        if (self.status == STATUS_OK) != (self.stl_path is not None):
            raise ValueError("stl_path must be present exactly when status is ok")
        if self.status == STATUS_COMPILE_ERROR and not self.error_text:
            raise ValueError("compile_error requires error text")

    @property
    def ok(self):
        return self.status == STATUS_OK


class _RunnerProcess:
    """A long-lived runner child with a background stdout reader."""

    def __init__(self, cmd):
        try:
            self.proc = subprocess.Popen(
                [str(c) for c in cmd], stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL, text=True, bufsize=1)
        except (FileNotFoundError, PermissionError) as exc:
            raise RunnerUnavailable(f"cannot start runner {cmd!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        reader = threading.Thread(target=self._pump, daemon=True)
        reader.start()

    def _pump(self):
        try:
            for line in self.proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def request(self, payload: dict, deadline_s: float):
        """One request/response round trip; None on deadline or EOF."""
        try:
            self.proc.stdin.write(json.dumps(payload) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            return None
        deadline = time.monotonic() + deadline_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                return None
            if line is None:
                return None
            if line.strip():
                return line

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:  # pragma: no cover - kill is forceful
            pass

    @property
    def alive(self):
        return self.proc.poll() is None


class ExecutorClient:
    """Thread-safe client over a bounded pool of runner processes.

    ``mode`` is "persistent" (default: processes are reused across calls) or
    "per_call" (a fresh process per execution). Distinct episodes may call
    concurrently; within an episode the pipeline serializes calls.
    """

    def __init__(self, runner_cmd, mode: str = "persistent", pool_size: int = 1,
                 artifacts_root=None):
        if mode not in ("persistent", "per_call"):
            raise ValueError("mode must be 'persistent' or 'per_call'")
        self.runner_cmd = list(runner_cmd)
        self.mode = mode
        self.pool_size = max(1, pool_size)
        self.artifacts_root = Path(artifacts_root) if artifacts_root else None
        self._pool: queue.Queue = queue.Queue()
        self._spawned = 0
        self._lock = threading.Lock()
        self._counter = 0

    # -- pool management ----------------------------------------------------

    def _checkout(self):
        with self._lock:
            try:
                return self._pool.get_nowait()
            except queue.Empty:
                pass
            if self._spawned < self.pool_size:
                self._spawned += 1
                try:
                    return _RunnerProcess(self.runner_cmd)
                except RunnerUnavailable:
                    self._spawned -= 1
                    raise
        return self._pool.get()

    def _checkin(self, process, healthy):
        if healthy and process.alive:
            self._pool.put(process)
            return
        process.kill()
        with self._lock:
            self._spawned -= 1

    def close(self):
        while True:
            try:
                self._pool.get_nowait().kill()
            except queue.Empty:
                break
        with self._lock:
            self._spawned = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- execution ------------------------------------------------------------

    def _next_id(self, script):
        with self._lock:
            self._counter += 1
            return f"{script.episode_id or 'adhoc'}:{script.stage}:{self._counter}"

    def _default_stl_out(self, script, request_id):
        if self.artifacts_root is None:
            raise ValueError("stl_out is required when no artifacts_root is configured")
        directory = self.artifacts_root / (script.episode_id or "adhoc")
        directory.mkdir(parents=True, exist_ok=True)
        return directory / f"{request_id.rsplit(':', 1)[-1]}_{script.stage}.stl"

    def execute_candidate(self, script: CandidateScript, timeout_s: float = 60.0,
                          stl_out=None) -> ExecutionResult:
        """Run one candidate script; never raises for script faults.

        The hard client-side deadline is twice ``timeout_s``: a runner that
        has not answered by then is killed and the result is a timeout.
        """
        if timeout_s <= 0:
            raise ValueError("timeout must be positive")
        request_id = self._next_id(script)
        stl_out = Path(stl_out) if stl_out is not None else self._default_stl_out(script, request_id)
        stl_out.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "id": request_id,
            "code": script.code,
            "timeout_s": timeout_s,
            "stl_out": str(stl_out),
        }
        started = time.monotonic()
        if self.mode == "per_call":
            line = self._per_call_round_trip(payload, 2.0 * timeout_s)
        else:
            process = self._checkout()
            line = process.request(payload, deadline_s=2.0 * timeout_s)
            self._checkin(process, healthy=line is not None)
        duration = time.monotonic() - started
        if line is None:
            return ExecutionResult(
                status=STATUS_TIMEOUT, duration=duration,
                error_text=f"runner unresponsive after {2.0 * timeout_s:.1f}s; killed")
        return self._result_from_line(line, request_id, duration)

    def _per_call_round_trip(self, payload, deadline_s):
        try:
            proc = subprocess.Popen(
                [str(c) for c in self.runner_cmd], stdin=subprocess.PIPE,
                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        except (FileNotFoundError, PermissionError) as exc:
            raise RunnerUnavailable(f"cannot start runner {self.runner_cmd!r}: {exc}") from exc
        try:
            out, _ = proc.communicate(json.dumps(payload) + "\n", timeout=deadline_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
            return None
        for line in out.splitlines():
            if line.strip():
                return line
        return None

    def _result_from_line(self, line, request_id, duration):
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            return ExecutionResult(status=STATUS_CRASH, duration=duration,
                                   error_text=f"undecodable runner response: {exc}")
        if response.get("id") != request_id:
            return ExecutionResult(
                status=STATUS_CRASH, duration=duration,
                error_text=f"runner answered id {response.get('id')!r} for request {request_id!r}")
        status = response.get("status")
        if status == STATUS_OK:
            stl_path = response.get("stl_path")
            if not stl_path or not os.path.exists(stl_path) or os.path.getsize(stl_path) == 0:
                return ExecutionResult(status=STATUS_CRASH, duration=duration,
                                       error_text="runner reported ok without a usable STL")
            return ExecutionResult(status=STATUS_OK, stl_path=stl_path, duration=duration)
        if status in (STATUS_COMPILE_ERROR, STATUS_TIMEOUT, STATUS_CRASH):
            error = response.get("error") or f"runner status {status}"
            return ExecutionResult(status=status, error_text=error, duration=duration)
        return ExecutionResult(status=STATUS_CRASH, duration=duration,
                               error_text=f"unknown runner status {status!r}")

/**
 * Execute one CAD script in a disposable python child process.
 *
 * Each request gets its own temp working directory; the harness
 * (py/harness.py) runs the script there, captures any traceback, ensures an
 * STL lands at the requested output path (auto-appending a standard export
 * when the script forgot one), and reports through outcome.json. A script
 * exceeding the timeout is SIGKILLed and reported in-band as "timeout"; the
 * runner process itself never dies for a script fault.
 */

import { spawn } from "node:child_process";
import { mkdtemp, readFile, rm, stat, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

import { RunnerRequest, RunnerResponse } from "./protocol.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
// dist/src -> package root -> py/
const PY_DIR = path.resolve(HERE, "..", "..", "py");
const HARNESS = path.join(PY_DIR, "harness.py");

const PYTHON = process.env.CAD_RUNNER_PYTHON ?? "python3";

interface Outcome {
  ok: boolean;
  error?: string;
}

async function fileSize(file: string): Promise<number> {
  try {
    return (await stat(file)).size;
  } catch {
    return -1;
  }
}

export async function executeRequest(request: RunnerRequest): Promise<RunnerResponse> {
  const started = Date.now();
  const elapsed = () => (Date.now() - started) / 1000;
  let workdir: string | null = null;
  try {
    workdir = await mkdtemp(path.join(tmpdir(), "cad-runner-"));
    const scriptPath = path.join(workdir, "script.py");
    await writeFile(scriptPath, request.code, "utf-8");
    const stlOut = path.resolve(request.stl_out);

    const child = spawn(PYTHON, [HARNESS, scriptPath, stlOut, workdir], {
      cwd: workdir,
      stdio: ["ignore", "ignore", "pipe"],
    });
    let stderrTail = "";
    child.stderr.on("data", (chunk: Buffer) => {
      stderrTail = (stderrTail + chunk.toString("utf-8")).slice(-4000);
    });

    let timedOut = false;
    const exitCode: number | null = await new Promise((resolve) => {
      const killer = setTimeout(() => {
        timedOut = true;
        child.kill("SIGKILL");
      }, request.timeout_s * 1000);
      child.on("error", () => {
        clearTimeout(killer);
        resolve(null);
      });
      child.on("close", (code) => {
        clearTimeout(killer);
        resolve(code);
      });
    });

    if (timedOut) {
      return {
        id: request.id,
        status: "timeout",
        error: `script exceeded the ${request.timeout_s}s time limit and was killed`,
        duration_s: elapsed(),
      };
    }

    let outcome: Outcome | null = null;
    try {
      outcome = JSON.parse(await readFile(path.join(workdir, "outcome.json"), "utf-8"));
    } catch {
      outcome = null;
    }
    if (outcome === null) {
      return {
        id: request.id,
        status: "crash",
        error: `harness produced no outcome (exit ${exitCode}): ${stderrTail.trim()}`,
        duration_s: elapsed(),
      };
    }
    if (!outcome.ok) {
      return {
        id: request.id,
        status: "compile_error",
        error: outcome.error || "script failed without a message",
        duration_s: elapsed(),
      };
    }
    if ((await fileSize(stlOut)) <= 0) {
      return {
        id: request.id,
        status: "crash",
        error: "harness reported success but the STL artifact is missing or empty",
        duration_s: elapsed(),
      };
    }
    return { id: request.id, status: "ok", stl_path: stlOut, duration_s: elapsed() };
  } catch (error) {
    return {
      id: request.id,
      status: "crash",
      error: `runner internal failure: ${String(error)}`,
      duration_s: elapsed(),
    };
  } finally {
    if (workdir !== null) {
      await rm(workdir, { recursive: true, force: true }).catch(() => undefined);
    }
  }
}

/**
 * Golden-corpus conformance: the runner answers the fixed request corpus
 * with field-exact responses (durations excluded; error fields are matched
 * on stable substrings since tracebacks embed temp paths).
 */

import assert from "node:assert/strict";
import { spawn, spawnSync } from "node:child_process";
import { once } from "node:events";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { createInterface } from "node:readline";
import { test } from "node:test";
import { fileURLToPath } from "node:url";

import { readBinaryStl } from "../src/stl.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const RUNNER = path.resolve(HERE, "..", "src", "runner.js");
const GOLDEN = path.resolve(HERE, "..", "..", "golden", "requests.json");
const PYTHON = process.env.CAD_RUNNER_PYTHON ?? "python3";

interface GoldenCase {
  name: string;
  request?: Record<string, unknown>;
  raw_line?: string;
  expect: Record<string, unknown>;
}

function loadGolden(outDir: string): GoldenCase[] {
  const text = readFileSync(GOLDEN, "utf-8").replaceAll("{OUT}", outDir);
  return JSON.parse(text) as GoldenCase[];
}

function realCadqueryAvailable(): boolean {
  const probe = spawnSync(PYTHON, ["-c", "import cadquery"], { stdio: "ignore" });
  return probe.status === 0;
}

test("golden request corpus conformance", async () => {
  const outDir = mkdtempSync(path.join(tmpdir(), "cad-runner-golden-"));
  const cases = loadGolden(outDir);
  const skipFallbackOnly = realCadqueryAvailable();

  const child = spawn(process.execPath, [RUNNER], {
    stdio: ["pipe", "pipe", "inherit"],
  });
  const lines = createInterface({ input: child.stdout!, crlfDelay: Infinity });
  const pending: string[] = [];
  const waiters: Array<(line: string) => void> = [];
  lines.on("line", (line) => {
    const waiter = waiters.shift();
    if (waiter) waiter(line);
    else pending.push(line);
  });
  const nextLine = () =>
    new Promise<string>((resolve) => {
      const buffered = pending.shift();
      if (buffered !== undefined) resolve(buffered);
      else waiters.push(resolve);
    });

  try {
    for (const goldenCase of cases) {
      const fallbackOnly = goldenCase.name.includes("unsupported kernel operation");
      if (fallbackOnly && skipFallbackOnly) continue;

      const line = goldenCase.raw_line ?? JSON.stringify(goldenCase.request);
      const started = Date.now();
      child.stdin!.write(line + "\n");
      const response = JSON.parse(await nextLine()) as Record<string, unknown>;
      const wallS = (Date.now() - started) / 1000;
      const expect = goldenCase.expect;

      assert.equal(response.id, expect.id, `${goldenCase.name}: id`);
      assert.equal(response.status, expect.status, `${goldenCase.name}: status`);
      assert.equal(typeof response.duration_s, "number", `${goldenCase.name}: duration`);
      if ("stl_path" in expect) {
        assert.equal(response.stl_path, expect.stl_path, `${goldenCase.name}: stl_path`);
      }
      if ("error_contains" in expect) {
        assert.ok(
          String(response.error ?? "").includes(String(expect.error_contains)),
          `${goldenCase.name}: error ${JSON.stringify(response.error)} ` +
            `should contain ${JSON.stringify(expect.error_contains)}`,
        );
      }
      if ("max_wall_s" in expect) {
        assert.ok(
          wallS < Number(expect.max_wall_s),
          `${goldenCase.name}: answered in ${wallS}s, limit ${expect.max_wall_s}s`,
        );
      }
      if ("stl_triangles" in expect) {
        const summary = readBinaryStl(readFileSync(String(response.stl_path)));
        assert.equal(summary.triangleCount, expect.stl_triangles, `${goldenCase.name}: facets`);
        const wanted = Number(expect.stl_volume);
        const relativeError = Math.abs(summary.enclosedVolume - wanted) / wanted;
        assert.ok(
          relativeError < 1e-6,
          `${goldenCase.name}: volume ${summary.enclosedVolume} vs ${wanted}`,
        );
      }
    }

    // one request always yields exactly one response: the stream is drained
    assert.equal(pending.length, 0, "no unsolicited responses");
  } finally {
    child.stdin!.end();
    child.kill("SIGKILL");
    await once(child, "close");
    rmSync(outDir, { recursive: true, force: true });
  }
});

test("timeout kill happens within twice the limit", async () => {
  const outDir = mkdtempSync(path.join(tmpdir(), "cad-runner-timeout-"));
  const child = spawn(process.execPath, [RUNNER], {
    stdio: ["pipe", "pipe", "inherit"],
  });
  try {
    const request = {
      id: "kill-check",
      code: "import time\ntime.sleep(60)\n",
      timeout_s: 1,
      stl_out: path.join(outDir, "never.stl"),
    };
    const started = Date.now();
    child.stdin!.write(JSON.stringify(request) + "\n");
    const lines = createInterface({ input: child.stdout!, crlfDelay: Infinity });
    const [line] = (await once(lines, "line")) as [string];
    const wallS = (Date.now() - started) / 1000;
    const response = JSON.parse(line) as Record<string, unknown>;
    assert.equal(response.status, "timeout");
    assert.equal(response.id, "kill-check");
    assert.ok(wallS < 2.0, `killed in ${wallS}s, limit 2s`);
  } finally {
    child.stdin!.end();
    child.kill("SIGKILL");
    await once(child, "close");
    rmSync(outDir, { recursive: true, force: true });
  }
});

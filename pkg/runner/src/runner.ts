#!/usr/bin/env node
/**
 * The CAD script runner: a single-threaded request loop over stdin/stdout.
 *
 * Every input line yields exactly one response line. Malformed input gets a
 * crash-status response rather than silence, and script faults are always
 * reported in-band — the process never exits nonzero because of them.
 * Parallelism comes from the orchestrator spawning several runners.
 */

import { createInterface } from "node:readline";

import { executeRequest } from "./execute.js";
import { parseRequest, serializeResponse } from "./protocol.js";

function emit(response: ReturnType<typeof serializeResponse>): void {
  process.stdout.write(response + "\n");
}

async function handleLine(line: string): Promise<void> {
  if (line.trim().length === 0) {
    return;
  }
  let request;
  try {
    request = parseRequest(line);
  } catch (error) {
    let id: string | null = null;
    try {
      const raw = JSON.parse(line) as Record<string, unknown>;
      id = typeof raw.id === "string" ? raw.id : null;
    } catch {
      id = null;
    }
    emit(serializeResponse({
      id,
      status: "crash",
      error: `malformed request: ${String(error instanceof Error ? error.message : error)}`,
      duration_s: 0,
    }));
    return;
  }
  const response = await executeRequest(request);
  emit(serializeResponse(response));
}

async function main(): Promise<void> {
  const reader = createInterface({ input: process.stdin, crlfDelay: Infinity });
  for await (const line of reader) {
    await handleLine(line);
  }
}

main().catch((error) => {
  process.stderr.write(`fatal: ${String(error)}\n`);
  process.exit(1);
});

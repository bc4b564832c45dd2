/**
 * The wire protocol: one JSON object per line, UTF-8.
 * Requests arrive on stdin, responses leave on stdout.
 */

export type RunnerStatus = "ok" | "compile_error" | "timeout" | "crash";

export interface RunnerRequest {
  id: string;
  code: string;
  timeout_s: number;
  stl_out: string;
}

export interface RunnerResponse {
  id: string | null;
  status: RunnerStatus;
  stl_path?: string;
  error?: string;
  duration_s: number;
}

export function parseRequest(line: string): RunnerRequest {
  const parsed: unknown = JSON.parse(line);
  if (typeof parsed !== "object" || parsed === null) {
    throw new Error("request is not a JSON object");
  }
  const record = parsed as Record<string, unknown>;
  if (typeof record.id !== "string" || record.id.length === 0) {
    throw new Error("request is missing a string 'id'");
  }
  if (typeof record.code !== "string" || record.code.length === 0) {
    throw new Error("request is missing non-empty 'code'");
  }
  const timeout = Number(record.timeout_s);
  if (!Number.isFinite(timeout) || timeout <= 0) {
    throw new Error("request needs a positive 'timeout_s'");
  }
  if (typeof record.stl_out !== "string" || record.stl_out.length === 0) {
    throw new Error("request is missing 'stl_out'");
  }
  return { id: record.id, code: record.code, timeout_s: timeout, stl_out: record.stl_out };
}

export function serializeResponse(response: RunnerResponse): string {
  return JSON.stringify(response);
}

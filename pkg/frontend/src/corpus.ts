/** Trace-record validation and JSONL corpus export.
 *
 * The emitted format is the engine's trace interchange: one JSON object per
 * line with fields `query_id`, `steps` (array of {score, tokens, origin,
 * truth?}), and `terminated`.
 */

import { writeFileSync } from "node:fs";

import type { Origin } from "./protocol.js";

export interface StepRow {
  score: number;
  tokens: number;
  origin: Origin;
  truth?: "correct" | "incorrect";
}

export interface TraceRecord {
  query_id: string;
  steps: StepRow[];
  terminated: boolean;
}

export class ValidationFailure extends Error {
  constructor(
    message: string,
    public readonly record: unknown,
  ) {
    super(message);
    this.name = "ValidationFailure";
  }
}

export function validateTrace(trace: TraceRecord): void {
  if (typeof trace.query_id !== "string" || trace.query_id.length === 0) {
    throw new ValidationFailure("query_id must be a nonempty string", trace);
  }
  if (typeof trace.terminated !== "boolean") {
    throw new ValidationFailure("terminated must be a boolean", trace);
  }
  if (!Array.isArray(trace.steps)) {
    throw new ValidationFailure("steps must be an array", trace);
  }
  for (const step of trace.steps) {
    if (typeof step.score !== "number" || !(step.score >= 0 && step.score <= 1)) {
      throw new ValidationFailure(`score ${step.score} outside [0, 1]`, trace);
    }
    if (!Number.isInteger(step.tokens) || step.tokens < 1) {
      throw new ValidationFailure(`tokens ${step.tokens} must be an integer >= 1`, trace);
    }
    if (step.origin !== "weak" && step.origin !== "strong") {
      throw new ValidationFailure(`unknown origin ${String(step.origin)}`, trace);
    }
    if (step.truth !== undefined && step.truth !== "correct" && step.truth !== "incorrect") {
      throw new ValidationFailure(`unknown truth ${String(step.truth)}`, trace);
    }
  }
}

export function traceToJsonl(trace: TraceRecord): string {
  validateTrace(trace);
  return JSON.stringify({
    query_id: trace.query_id,
    steps: trace.steps.map((s) => {
      const row: Record<string, unknown> = { score: s.score, tokens: s.tokens, origin: s.origin };
      if (s.truth !== undefined) row["truth"] = s.truth;
      return row;
    }),
    terminated: trace.terminated,
  });
}

/** Validate every record, then write the corpus; returns the line count. */
export function exportCorpus(traces: TraceRecord[], path: string): number {
  const lines = traces.map(traceToJsonl);
  writeFileSync(path, lines.join("\n") + (lines.length ? "\n" : ""), "utf-8");
  return lines.length;
}

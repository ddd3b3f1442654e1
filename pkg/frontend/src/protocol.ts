/**
 * Step-protocol message schema.
 *
 * Requests flow from the routing engine to the bridge; each request kind has
 * exactly one response kind:
 *
 *   propose_weak      -> step_result   (cheap generator drafts the next step)
 *   regenerate_strong -> step_result   (expensive generator replaces the pending step)
 *   score_step        -> score_result  (scorer grades the pending step)
 *   terminate         -> terminate     (ack; episode is finalized)
 *
 * The bridge answers any failed request with an `error` message instead of
 * the normal response. Malformed or out-of-order requests raise
 * ProtocolViolation and are answered with an `error` of code
 * "protocol_violation".
 */

export type Origin = "weak" | "strong";

export interface ProposeWeak {
  kind: "propose_weak";
  query_id: string;
  /** Full accepted text so far (query plus accepted steps). */
  prefix: string;
}

export interface RegenerateStrong {
  kind: "regenerate_strong";
  query_id: string;
  /** Prefix BEFORE the discarded proposal; must match the bridge's state. */
  prefix: string;
}

export interface ScoreStep {
  kind: "score_step";
  query_id: string;
  prefix: string;
  /** Text of the pending step to grade; must match the bridge's pending step. */
  step: string;
}

export interface Terminate {
  kind: "terminate";
  query_id: string;
}

export type EngineRequest = ProposeWeak | RegenerateStrong | ScoreStep | Terminate;

export interface StepResult {
  kind: "step_result";
  query_id: string;
  step: string;
  /** Decode tokens the endpoint reported for this step; always >= 1. */
  token_count: number;
  origin: Origin;
}

export interface ScoreResult {
  kind: "score_result";
  query_id: string;
  /** Score clamped into [0, 1]; `clamped` flags out-of-range endpoint output. */
  score: number;
  clamped?: boolean;
}

export interface TerminateAck {
  kind: "terminate";
  query_id: string;
  steps: number;
}

export interface ErrorMessage {
  kind: "error";
  query_id: string;
  code: "protocol_violation" | "endpoint_failure" | "internal";
  message: string;
}

export type BridgeResponse = StepResult | ScoreResult | TerminateAck | ErrorMessage;

export class ProtocolViolation extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolViolation";
  }
}

const REQUEST_KINDS = new Set(["propose_weak", "regenerate_strong", "score_step", "terminate"]);

function requireString(obj: Record<string, unknown>, field: string): string {
  const value = obj[field];
  if (typeof value !== "string") {
    throw new ProtocolViolation(`field ${field} must be a string`);
  }
  return value;
}

/** Parse and shape-check one request line. */
export function parseRequest(line: string): EngineRequest {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch (err) {
    throw new ProtocolViolation(`not valid JSON: ${(err as Error).message}`);
  }
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new ProtocolViolation("request must be a JSON object");
  }
  const rec = obj as Record<string, unknown>;
  const kind = rec["kind"];
  if (typeof kind !== "string" || !REQUEST_KINDS.has(kind)) {
    throw new ProtocolViolation(`unknown request kind ${JSON.stringify(kind)}`);
  }
  const query_id = requireString(rec, "query_id");
  switch (kind) {
    case "propose_weak":
      return { kind, query_id, prefix: requireString(rec, "prefix") };
    case "regenerate_strong":
      return { kind, query_id, prefix: requireString(rec, "prefix") };
    case "score_step":
      return {
        kind,
        query_id,
        prefix: requireString(rec, "prefix"),
        step: requireString(rec, "step"),
      };
    default:
      return { kind: "terminate", query_id };
  }
}

export function serialize(message: BridgeResponse | EngineRequest): string {
  return JSON.stringify(message) + "\n";
}

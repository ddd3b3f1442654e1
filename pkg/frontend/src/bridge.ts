/** Bridge session: translates engine requests into endpoint calls and
 * accumulates the routed episode as a trace record.
 *
 * Episode lifecycle (one in-flight episode per session):
 *
 *   idle          --propose_weak-->   awaiting_score   (weak draft pending)
 *   awaiting_score --score_step-->    scored | idle    (weak stays pending; a
 *                                                       strong step is accepted
 *                                                       as soon as it is scored)
 *   scored        --propose_weak-->   awaiting_score   (pending weak accepted)
 *   scored        --regenerate_strong--> awaiting_score (pending weak discarded)
 *   scored | idle --terminate-->      done             (pending weak accepted)
 *
 * Any other request order, or a prefix that disagrees with the accepted
 * text, is a protocol violation. Endpoint failures produce an `error`
 * response and mark the episode incomplete; incomplete episodes are never
 * exported.
 */

import type { GeneratorEndpoint, ScorerEndpoint } from "./endpoints.js";
import {
  type BridgeResponse,
  type EngineRequest,
  type Origin,
  ProtocolViolation,
  parseRequest,
} from "./protocol.js";
import type { StepRow, TraceRecord } from "./corpus.js";

export interface BridgeConfig {
  weak: GeneratorEndpoint;
  strong: GeneratorEndpoint;
  scorer: ScorerEndpoint;
  /** Steps are delimited by blank lines; longer endpoint output is cut at
   * the first delimiter and hard-capped at this many characters. */
  maxStepChars?: number;
  stepSeparator?: string;
}

export interface SessionWarning {
  queryId: string;
  message: string;
}

export interface FinishedEpisode {
  trace: TraceRecord;
  complete: boolean;
  warnings: SessionWarning[];
}

interface Pending {
  text: string;
  tokenCount: number;
  origin: Origin;
  score?: number;
}

type Phase = "idle" | "awaiting_score" | "scored" | "done";

/** First blank-line-delimited segment of the endpoint output. */
export function segmentStep(text: string, separator: string, maxChars: number): string {
  const parts = text.split(separator);
  let head = parts[0] ?? "";
  for (const part of parts) {
    if (part.trim().length > 0) {
      head = part;
      break;
    }
  }
  return head.length > maxChars ? head.slice(0, maxChars) : head;
}

export class BridgeSession {
  private phase: Phase = "idle";
  private queryId: string | null = null;
  private root = "";
  private accepted: StepRow[] = [];
  private acceptedText: string[] = [];
  private pending: Pending | null = null;
  private failed = false;
  readonly warnings: SessionWarning[] = [];
  private readonly separator: string;
  private readonly maxStepChars: number;

  constructor(
    private readonly config: BridgeConfig,
    private readonly onEpisode?: (episode: FinishedEpisode) => void,
  ) {
    this.separator = config.stepSeparator ?? "\n\n";
    this.maxStepChars = config.maxStepChars ?? 4000;
  }

  /** Canonical accepted text: root prefix plus accepted steps. */
  private canonicalPrefix(): string {
    return [this.root, ...this.acceptedText].join(this.separator);
  }

  private expectQuery(request: EngineRequest): void {
    if (this.queryId !== null && request.query_id !== this.queryId) {
      throw new ProtocolViolation(
        `query_id ${request.query_id} does not match in-flight episode ${this.queryId}`,
      );
    }
  }

  private acceptPending(): void {
    const pending = this.pending;
    if (!pending || pending.score === undefined) {
      throw new ProtocolViolation("no scored pending step to accept");
    }
    this.accepted.push({
      score: pending.score,
      tokens: pending.tokenCount,
      origin: pending.origin,
    });
    this.acceptedText.push(pending.text);
    this.pending = null;
  }

  private async generate(origin: Origin, prefix: string): Promise<BridgeResponse> {
    const endpoint = origin === "weak" ? this.config.weak : this.config.strong;
    const result = await endpoint.generate(prefix);
    const step = segmentStep(result.text, this.separator, this.maxStepChars);
    if (!Number.isInteger(result.tokenCount) || result.tokenCount < 1) {
      throw new ProtocolViolation(
        `${origin} endpoint reported token_count ${result.tokenCount}; expected an integer >= 1`,
      );
    }
    this.pending = { text: step, tokenCount: result.tokenCount, origin };
    this.phase = "awaiting_score";
    return {
      kind: "step_result",
      query_id: this.queryId as string,
      step,
      token_count: result.tokenCount,
      origin,
    };
  }

  /** Handle one parsed request; returns exactly one response. */
  async handle(request: EngineRequest): Promise<BridgeResponse> {
    try {
      return await this.dispatch(request);
    } catch (err) {
      if (err instanceof ProtocolViolation) {
        return {
          kind: "error",
          query_id: request.query_id,
          code: "protocol_violation",
          message: err.message,
        };
      }
      this.failed = true;
      this.finishEpisode(false);
      return {
        kind: "error",
        query_id: request.query_id,
        code: "endpoint_failure",
        message: (err as Error).message,
      };
    }
  }

  /** Line-oriented entry point used by socket transports. */
  async handleLine(line: string): Promise<string> {
    let request: EngineRequest;
    try {
      request = parseRequest(line);
    } catch (err) {
      const message = err instanceof ProtocolViolation ? err.message : String(err);
      return (
        JSON.stringify({
          kind: "error",
          query_id: "",
          code: "protocol_violation",
          message,
        }) + "\n"
      );
    }
    return JSON.stringify(await this.handle(request)) + "\n";
  }

  private async dispatch(request: EngineRequest): Promise<BridgeResponse> {
    this.expectQuery(request);
    switch (request.kind) {
      case "propose_weak": {
        if (this.phase === "idle") {
          if (this.queryId === null) {
            this.queryId = request.query_id;
            this.root = request.prefix;
          } else if (request.prefix !== this.canonicalPrefix()) {
            throw new ProtocolViolation("propose_weak prefix does not match accepted text");
          }
          return this.generate("weak", request.prefix);
        }
        if (this.phase === "scored") {
          const accepted = this.canonicalPrefix() + this.separator + (this.pending?.text ?? "");
          if (request.prefix !== accepted) {
            throw new ProtocolViolation(
              "propose_weak prefix must extend the scored pending step (implicit accept)",
            );
          }
          this.acceptPending();
          return this.generate("weak", request.prefix);
        }
        throw new ProtocolViolation(`propose_weak illegal in phase ${this.phase}`);
      }
      case "regenerate_strong": {
        if (this.phase !== "scored" || !this.pending || this.pending.origin !== "weak") {
          throw new ProtocolViolation("regenerate_strong requires a scored weak proposal");
        }
        if (request.prefix !== this.canonicalPrefix()) {
          throw new ProtocolViolation("regenerate_strong prefix must be the pre-proposal prefix");
        }
        this.pending = null; // discard the weak draft; its latent effect must not persist
        return this.generate("strong", request.prefix);
      }
      case "score_step": {
        if (this.phase !== "awaiting_score" || !this.pending) {
          throw new ProtocolViolation("score_step requires an unscored pending step");
        }
        if (request.step !== this.pending.text || request.prefix !== this.canonicalPrefix()) {
          throw new ProtocolViolation("score_step must reference the pending step");
        }
        const raw = await this.config.scorer.score(request.prefix, request.step);
        let score = raw;
        let clamped = false;
        if (!Number.isFinite(raw)) {
          throw new ProtocolViolation(`scorer returned non-finite score ${raw}`);
        }
        if (raw < 0 || raw > 1) {
          score = Math.min(1, Math.max(0, raw));
          clamped = true;
          this.warnings.push({
            queryId: this.queryId as string,
            message: `score ${raw} clamped to ${score}`,
          });
        }
        this.pending.score = score;
        if (this.pending.origin === "strong") {
          // A regenerated step is taken unconditionally once scored.
          this.acceptPending();
          this.phase = "idle";
        } else {
          this.phase = "scored";
        }
        const response: BridgeResponse = {
          kind: "score_result",
          query_id: this.queryId as string,
          score,
        };
        if (clamped) response.clamped = true;
        return response;
      }
      case "terminate": {
        if (this.phase === "scored") {
          this.acceptPending();
        } else if (this.phase !== "idle") {
          throw new ProtocolViolation(`terminate illegal in phase ${this.phase}`);
        }
        const steps = this.accepted.length;
        this.finishEpisode(true);
        return { kind: "terminate", query_id: request.query_id, steps };
      }
    }
  }

  private finishEpisode(complete: boolean): void {
    if (this.queryId === null) {
      return;
    }
    const episode: FinishedEpisode = {
      trace: { query_id: this.queryId, steps: this.accepted, terminated: complete },
      complete: complete && !this.failed,
      warnings: [...this.warnings],
    };
    this.onEpisode?.(episode);
    this.phase = complete ? "idle" : "done";
    this.queryId = null;
    this.root = "";
    this.accepted = [];
    this.acceptedText = [];
    this.pending = null;
    this.failed = false;
    this.warnings.length = 0;
  }
}

/** Collects finished episodes across sessions for corpus export. */
export class SessionLog {
  readonly episodes: FinishedEpisode[] = [];

  record = (episode: FinishedEpisode): void => {
    this.episodes.push(episode);
  };

  completeTraces(): TraceRecord[] {
    return this.episodes.filter((e) => e.complete).map((e) => e.trace);
  }
}

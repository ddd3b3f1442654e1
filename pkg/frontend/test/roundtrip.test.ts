/** Acceptance: bridge sessions export JSONL that the engine's replay loader
 * ingests with zero validation errors, and scripted episodes reproduce
 * exactly. The engine is consumed strictly through its external interfaces
 * (the trace JSONL format and the `replay` CLI). */

import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { createConnection } from "node:net";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import { SessionLog, BridgeSession } from "../src/bridge.js";
import { exportCorpus } from "../src/corpus.js";
import type { GenerationResult, GeneratorEndpoint, ScorerEndpoint } from "../src/endpoints.js";
import type { EngineRequest } from "../src/protocol.js";
import { startBridgeServer } from "../src/server.js";

class CyclingGenerator implements GeneratorEndpoint {
  private i = 0;
  constructor(private readonly outputs: GenerationResult[]) {}
  async generate(): Promise<GenerationResult> {
    const out = this.outputs[this.i % this.outputs.length]!;
    this.i += 1;
    return out;
  }
}

class CyclingScorer implements ScorerEndpoint {
  private i = 0;
  constructor(private readonly scores: number[]) {}
  async score(): Promise<number> {
    const s = this.scores[this.i % this.scores.length]!;
    this.i += 1;
    return s;
  }
}

function pythonReplay(corpusPath: string, outDir: string) {
  const cfgPath = join(outDir, "replay_cfg.json");
  writeFileSync(cfgPath, JSON.stringify({ corpus: corpusPath, seed: 0 }));
  return spawnSync(
    "python3",
    ["-m", "steproute.cli", "replay", "--config", cfgPath, "--out", join(outDir, "replay")],
    { encoding: "utf-8" },
  );
}

async function runScriptedEpisode(session: BridgeSession, queryId: string): Promise<void> {
  const send = (req: EngineRequest) => session.handle(req);
  const r1 = await send({ kind: "propose_weak", query_id: queryId, prefix: "Q" });
  if (r1.kind !== "step_result") throw new Error(`unexpected ${r1.kind}`);
  const s1 = await send({ kind: "score_step", query_id: queryId, prefix: "Q", step: r1.step });
  if (s1.kind !== "score_result") throw new Error(`unexpected ${s1.kind}`);
  if (s1.score < 0.5) {
    const regen = await send({ kind: "regenerate_strong", query_id: queryId, prefix: "Q" });
    if (regen.kind !== "step_result") throw new Error(`unexpected ${regen.kind}`);
    await send({ kind: "score_step", query_id: queryId, prefix: "Q", step: regen.step });
    await send({ kind: "terminate", query_id: queryId });
    return;
  }
  const prefix2 = `Q\n\n${r1.step}`;
  const r2 = await send({ kind: "propose_weak", query_id: queryId, prefix: prefix2 });
  if (r2.kind !== "step_result") throw new Error(`unexpected ${r2.kind}`);
  await send({ kind: "score_step", query_id: queryId, prefix: prefix2, step: r2.step });
  await send({ kind: "terminate", query_id: queryId });
}

describe("export/replay round trip", () => {
  it("replay loader ingests exported corpora with zero validation errors", async () => {
    const log = new SessionLog();
    for (let ep = 0; ep < 3; ep++) {
      const session = new BridgeSession(
        {
          weak: new CyclingGenerator([
            { text: `draft ${ep}`, tokenCount: 11 + ep },
            { text: "follow-up", tokenCount: 5 },
          ]),
          strong: new CyclingGenerator([{ text: "rescue", tokenCount: 21 }]),
          scorer: new CyclingScorer([ep === 1 ? 0.2 : 0.9, 0.7]),
        },
        log.record,
      );
      await runScriptedEpisode(session, `ep${ep}`);
    }

    const dir = mkdtempSync(join(tmpdir(), "roundtrip-"));
    const corpusPath = join(dir, "corpus.jsonl");
    const n = exportCorpus(log.completeTraces(), corpusPath);
    expect(n).toBe(3);

    const proc = pythonReplay(corpusPath, dir);
    expect(proc.status, proc.stderr).toBe(0);
    const summary = JSON.parse(
      readFileSync(join(dir, "replay", "replay_summary.json"), "utf-8"),
    );
    expect(summary.n_traces).toBe(3);

    // Scripted episode ep1 regenerated its first step: exact reproduction.
    const lines = readFileSync(corpusPath, "utf-8").trim().split("\n").map((l) => JSON.parse(l));
    expect(lines[1]).toEqual({
      query_id: "ep1",
      steps: [{ score: 0.7, tokens: 21, origin: "strong" }],
      terminated: true,
    });
    expect(lines[0]).toEqual({
      query_id: "ep0",
      steps: [
        { score: 0.9, tokens: 11, origin: "weak" },
        { score: 0.7, tokens: 5, origin: "weak" },
      ],
      terminated: true,
    });
  });

  it("drives an episode over the TCP transport", async () => {
    const bridge = await startBridgeServer({
      weak: new CyclingGenerator([{ text: "socket step", tokenCount: 9 }]),
      strong: new CyclingGenerator([{ text: "unused", tokenCount: 1 }]),
      scorer: new CyclingScorer([0.8]),
    });
    try {
      const socket = createConnection({ port: bridge.port, host: "127.0.0.1" });
      const replies: string[] = [];
      let buffer = "";
      const nextReply = () =>
        new Promise<Record<string, unknown>>((resolve) => {
          const tryRead = () => {
            const idx = buffer.indexOf("\n");
            if (idx >= 0) {
              const line = buffer.slice(0, idx);
              buffer = buffer.slice(idx + 1);
              replies.push(line);
              resolve(JSON.parse(line));
              return true;
            }
            return false;
          };
          if (tryRead()) return;
          socket.on("data", (chunk) => {
            buffer += chunk.toString("utf-8");
            tryRead();
          });
        });

      await new Promise<void>((resolve) => socket.once("connect", () => resolve()));
      socket.write(JSON.stringify({ kind: "propose_weak", query_id: "s1", prefix: "Q" }) + "\n");
      const step = await nextReply();
      expect(step).toMatchObject({ kind: "step_result", step: "socket step" });
      socket.write(
        JSON.stringify({ kind: "score_step", query_id: "s1", prefix: "Q", step: "socket step" }) +
          "\n",
      );
      const score = await nextReply();
      expect(score).toMatchObject({ kind: "score_result", score: 0.8 });
      socket.write(JSON.stringify({ kind: "terminate", query_id: "s1" }) + "\n");
      const ack = await nextReply();
      expect(ack).toMatchObject({ kind: "terminate", steps: 1 });
      socket.end();

      expect(bridge.log.completeTraces()).toHaveLength(1);
    } finally {
      await bridge.close();
    }
  });

  it("engine package is importable for the replay round trip", () => {
    const probe = spawnSync("python3", ["-c", "import steproute"], { encoding: "utf-8" });
    expect(probe.status, probe.stderr).toBe(0);
  });
});

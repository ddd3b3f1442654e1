/** Pluggable generator/scorer endpoints with timeout-and-retry semantics. */

export interface GenerationResult {
  text: string;
  tokenCount: number;
}

export interface GeneratorEndpoint {
  generate(prefix: string): Promise<GenerationResult>;
}

export interface ScorerEndpoint {
  score(prefix: string, step: string): Promise<number>;
}

export class EndpointTimeout extends Error {
  constructor(message: string) {
    super(message);
    this.name = "EndpointTimeout";
  }
}

export interface HttpEndpointOptions {
  timeoutMs?: number;
  retries?: number;
}

async function postJson(
  url: string,
  payload: unknown,
  timeoutMs: number,
  retries: number,
): Promise<Record<string, unknown>> {
  let lastError: Error = new EndpointTimeout(`no attempts made against ${url}`);
  for (let attempt = 0; attempt <= retries; attempt++) {
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), timeoutMs);
    try {
      const res = await fetch(url, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
        signal: controller.signal,
      });
      if (!res.ok) {
        throw new Error(`${url} returned HTTP ${res.status}`);
      }
      return (await res.json()) as Record<string, unknown>;
    } catch (err) {
      lastError =
        (err as Error).name === "AbortError"
          ? new EndpointTimeout(`${url} timed out after ${timeoutMs}ms`)
          : (err as Error);
    } finally {
      clearTimeout(timer);
    }
  }
  throw lastError;
}

/** Generator behind a JSON-over-HTTP endpoint: POST {prefix} -> {text, token_count}. */
export class HttpGeneratorEndpoint implements GeneratorEndpoint {
  constructor(
    private readonly url: string,
    private readonly options: HttpEndpointOptions = {},
  ) {}

  async generate(prefix: string): Promise<GenerationResult> {
    const obj = await postJson(
      this.url,
      { prefix },
      this.options.timeoutMs ?? 30_000,
      this.options.retries ?? 1,
    );
    return { text: String(obj["text"] ?? ""), tokenCount: Number(obj["token_count"] ?? 0) };
  }
}

/** Scorer behind a JSON-over-HTTP endpoint: POST {prefix, step} -> {score}. */
export class HttpScorerEndpoint implements ScorerEndpoint {
  constructor(
    private readonly url: string,
    private readonly options: HttpEndpointOptions = {},
  ) {}

  async score(prefix: string, step: string): Promise<number> {
    const obj = await postJson(
      this.url,
      { prefix, step },
      this.options.timeoutMs ?? 30_000,
      this.options.retries ?? 1,
    );
    return Number(obj["score"]);
  }
}

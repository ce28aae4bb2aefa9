/**
 * Typed client for the /v1 chat service API.
 *
 * The console never synthesizes answers or metrics on its own: every piece of
 * displayed data comes straight out of these calls.
 */

export interface SseEvent {
  event: string;
  data: Record<string, unknown>;
}

export interface Usage {
  input_tokens: number;
  output_tokens: number;
}

export interface DoneEvent {
  record_id: string;
  refused: boolean;
  needs_clarification: boolean;
  agent: string;
  usage: Usage;
  latency_ms: { first_token: number; total: number };
}

export interface RecordPayload {
  record_id: string;
  question?: string;
  answer: string;
  citations: string[];
  agent: string;
  query_type?: string;
  refused: boolean;
  verdict?: string | null;
  timestamp?: number;
}

export interface DailyMetrics {
  date: string;
  questions: number;
  input_tokens: number;
  output_tokens: number;
  accuracy: number | null;
  p50_ms: number;
  p95_ms: number;
}

export interface CostInfo {
  model: string;
  cost: number;
  input_tokens: number;
  output_tokens: number;
}

export interface StreamHandlers {
  onToken?: (text: string) => void;
  onCitation?: (unitId: string) => void;
  onDone?: (done: DoneEvent) => void;
}

type FetchLike = typeof fetch;

/** Parse a text/event-stream body into discrete events. */
export async function* parseSse(
  body: ReadableStream<Uint8Array>,
): AsyncGenerator<SseEvent> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  while (true) {
    const { done, value } = await reader.read();
    if (done) break;
    buffer += decoder.decode(value, { stream: true });
    const blocks = buffer.split("\n\n");
    buffer = blocks.pop() ?? "";
    for (const block of blocks) {
      const event = parseSseBlock(block);
      if (event) yield event;
    }
  }
  const tail = parseSseBlock(buffer);
  if (tail) yield tail;
}

function parseSseBlock(block: string): SseEvent | null {
  let event = "";
  const dataLines: string[] = [];
  for (const line of block.split("\n")) {
    if (line.startsWith("event:")) event = line.slice("event:".length).trim();
    else if (line.startsWith("data:")) dataLines.push(line.slice("data:".length).trim());
  }
  if (!event || dataLines.length === 0) return null;
  return { event, data: JSON.parse(dataLines.join("\n")) };
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = fetch,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      const body = await response.text().catch(() => "");
      throw new ApiError(response.status, `${response.status} on ${path}: ${body}`);
    }
    return response;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.request(path, init);
    return (await response.json()) as T;
  }

  async createSession(): Promise<string> {
    const body = await this.json<{ session_id: string }>("/v1/sessions", { method: "POST" });
    return body.session_id;
  }

  /** Stream one message; resolves with the `done` event after the stream ends. */
  async sendMessage(
    sessionId: string,
    text: string,
    handlers: StreamHandlers = {},
  ): Promise<DoneEvent> {
    const response = await this.request(`/v1/sessions/${sessionId}/messages`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
    if (!response.body) throw new ApiError(0, "response has no body to stream");
    let done: DoneEvent | null = null;
    for await (const event of parseSse(response.body)) {
      if (event.event === "token") handlers.onToken?.(event.data.text as string);
      else if (event.event === "citation") handlers.onCitation?.(event.data.unit_id as string);
      else if (event.event === "done") {
        done = event.data as unknown as DoneEvent;
        handlers.onDone?.(done);
      }
    }
    if (!done) throw new ApiError(0, "stream ended without a done event");
    return done;
  }

  async sendMessageSync(sessionId: string, text: string): Promise<RecordPayload> {
    return this.json<RecordPayload>(`/v1/sessions/${sessionId}/messages?stream=false`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
  }

  async fetchRecord(recordId: string): Promise<RecordPayload> {
    return this.json<RecordPayload>(`/v1/records/${recordId}`);
  }

  async unitText(unitId: string): Promise<{ unit_id: string; kind: string; text: string }> {
    return this.json(`/v1/units/${unitId}`);
  }

  async rateRecord(
    recordId: string,
    verdict: "correct" | "incorrect",
    rater: string,
    adminToken: string,
  ): Promise<void> {
    await this.request(`/v1/records/${recordId}/verdict`, {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${adminToken}`,
      },
      body: JSON.stringify({ verdict, rater }),
    });
  }

  async listRecords(adminToken: string, limit = 200): Promise<RecordPayload[]> {
    const body = await this.json<{ records: RecordPayload[] }>(
      `/v1/records?limit=${limit}`,
      { headers: { Authorization: `Bearer ${adminToken}` } },
    );
    return body.records;
  }

  async dailyMetrics(from: string, to: string): Promise<DailyMetrics[]> {
    const body = await this.json<{ days: DailyMetrics[] }>(
      `/v1/metrics/daily?from=${from}&to=${to}`,
    );
    return body.days;
  }

  async cost(model?: string): Promise<CostInfo> {
    const suffix = model ? `?model=${encodeURIComponent(model)}` : "";
    return this.json<CostInfo>(`/v1/metrics/cost${suffix}`);
  }

  async health(): Promise<{ status: string; units: number }> {
    return this.json("/v1/health");
  }
}

import type { StreamMessage } from "./types.js";

export type ParsedEvent = { id: string; event: string; data: string };

// Incremental text/event-stream parser. Feed it raw chunks; it emits one
// ParsedEvent per blank-line-terminated block and reports comment lines
// (the server uses those as heartbeats) separately.
export class SseParser {
  private buffer = "";
  private id = "";
  private event = "";
  private data: string[] = [];

  constructor(
    private readonly onEvent: (ev: ParsedEvent) => void,
    private readonly onComment: (text: string) => void = () => {},
  ) {}

  feed(chunk: string): void {
    this.buffer += chunk;
    let nl: number;
    while ((nl = this.buffer.indexOf("\n")) >= 0) {
      let line = this.buffer.slice(0, nl);
      this.buffer = this.buffer.slice(nl + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      this.line(line);
    }
  }

  private line(line: string): void {
    if (line === "") {
      if (this.event || this.data.length) {
        this.onEvent({ id: this.id, event: this.event, data: this.data.join("\n") });
      }
      this.event = "";
      this.data = [];
      return;
    }
    if (line.startsWith(":")) {
      this.onComment(line.slice(1).trimStart());
      return;
    }
    const colon = line.indexOf(":");
    const field = colon < 0 ? line : line.slice(0, colon);
    let value = colon < 0 ? "" : line.slice(colon + 1);
    if (value.startsWith(" ")) value = value.slice(1);
    if (field === "id") this.id = value;
    else if (field === "event") this.event = value;
    else if (field === "data") this.data.push(value);
  }
}

export type ConnectionState = "connecting" | "live" | "lost";

export type StreamOptions = {
  sandbox: string; // sandbox id or "all"
  onMessage: (msg: StreamMessage) => void;
  onStatus?: (state: ConnectionState) => void;
  fetchImpl?: typeof fetch;
  retryDelayMs?: number;
};

// Client for the service's /stream endpoint. Reconnects automatically and
// resumes from the last seen event id, deduplicates redelivered command
// events, and records any sequence numbers that never arrived.
export class StreamClient {
  lastEventId = "";
  private closed = false;
  private controller: AbortController | null = null;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private state: ConnectionState = "connecting";
  private readonly lastSeq = new Map<string, number>();
  private readonly missing = new Map<string, number[]>();
  private readonly fetchImpl: typeof fetch;
  private readonly retryDelayMs: number;

  constructor(
    private readonly baseUrl: string,
    private readonly options: StreamOptions,
  ) {
    this.fetchImpl = options.fetchImpl ?? fetch;
    this.retryDelayMs = options.retryDelayMs ?? 1000;
  }

  start(): void {
    void this.connect();
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer) clearTimeout(this.retryTimer);
    this.controller?.abort();
  }

  // Command seqs that were skipped over, per sandbox: non-empty means the
  // feed has holes the server never backfilled.
  gaps(): Map<string, number[]> {
    return this.missing;
  }

  private setState(state: ConnectionState): void {
    if (state === this.state) return;
    this.state = state;
    this.options.onStatus?.(state);
  }

  private async connect(): Promise<void> {
    if (this.closed) return;
    this.controller = new AbortController();
    const headers: Record<string, string> = { Accept: "text/event-stream" };
    if (this.lastEventId) headers["Last-Event-ID"] = this.lastEventId;
    const url = `${this.baseUrl}/stream?sandbox=${encodeURIComponent(this.options.sandbox)}`;
    try {
      const res = await this.fetchImpl(url, { headers, signal: this.controller.signal });
      if (!res.ok || !res.body) throw new Error(`stream http ${res.status}`);
      this.setState("live");
      const parser = new SseParser(
        (ev) => this.dispatch(ev),
        () => this.setState("live"), // heartbeat: connection is healthy
      );
      const reader = res.body.getReader();
      const decoder = new TextDecoder();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        parser.feed(decoder.decode(value, { stream: true }));
      }
      throw new Error("stream ended");
    } catch {
      if (this.closed) return;
      this.setState("lost");
      this.retryTimer = setTimeout(() => void this.connect(), this.retryDelayMs);
    }
  }

  private dispatch(ev: ParsedEvent): void {
    if (ev.id) this.lastEventId = ev.id;
    if (ev.event !== "command" && ev.event !== "finding" && ev.event !== "step") return;
    let data: StreamMessage["data"];
    try {
      data = JSON.parse(ev.data);
    } catch {
      return;
    }
    if (ev.event === "command") {
      const rec = data as { sandbox_id: string; seq: number };
      const seen = this.lastSeq.get(rec.sandbox_id) ?? 0;
      if (rec.seq <= seen) return; // redelivery after resume
      if (rec.seq > seen + 1) {
        const holes = this.missing.get(rec.sandbox_id) ?? [];
        for (let s = seen + 1; s < rec.seq; s++) holes.push(s);
        this.missing.set(rec.sandbox_id, holes);
      }
      this.lastSeq.set(rec.sandbox_id, rec.seq);
    }
    this.options.onMessage({ type: ev.event, id: ev.id, data } as StreamMessage);
  }
}

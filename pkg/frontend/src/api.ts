import type { CommandRecord, Finding, ProgressGraph, Stats, TimelineEvent } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

type FetchLike = typeof fetch;

// Thin typed client over the service's HTTP API. `fetchImpl` is injectable
// so tests can stub the network or hand in Node's fetch explicitly.
export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path);
    const body = await res.json().catch(() => null);
    if (!res.ok) {
      const detail = body && typeof body === "object" && "error" in body
        ? String((body as { error: unknown }).error)
        : res.statusText;
      throw new ApiError(res.status, detail);
    }
    return body as T;
  }

  sandboxes(): Promise<string[]> {
    return this.get("/api/sandboxes");
  }

  commands(sandbox: string, since?: number | string): Promise<CommandRecord[]> {
    const suffix = since === undefined ? "" : `?since=${encodeURIComponent(since)}`;
    return this.get(`/api/sandboxes/${encodeURIComponent(sandbox)}/commands${suffix}`);
  }

  findings(sandbox: string): Promise<Finding[]> {
    return this.get(`/api/sandboxes/${encodeURIComponent(sandbox)}/findings`);
  }

  progress(sandbox: string): Promise<ProgressGraph> {
    return this.get(`/api/sandboxes/${encodeURIComponent(sandbox)}/progress`);
  }

  timeline(sandbox: string): Promise<TimelineEvent[]> {
    return this.get(`/api/sandboxes/${encodeURIComponent(sandbox)}/timeline`);
  }

  stats(): Promise<Stats> {
    return this.get("/api/stats");
  }
}

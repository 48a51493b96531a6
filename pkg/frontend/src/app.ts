import { ApiClient } from "./api.js";
import { StreamClient } from "./sse.js";
import { initialState, reduce } from "./state.js";
import type { Action, ViewState } from "./state.js";
import { renderApp } from "./views.js";

const STATS_POLL_MS = 10_000;
const REFRESH_DEBOUNCE_MS = 300;

export class Dashboard {
  private state: ViewState = initialState();
  private readonly api: ApiClient;
  private stream: StreamClient | null = null;
  private statsTimer: ReturnType<typeof setInterval> | null = null;
  private refreshTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly root: HTMLElement,
    baseUrl: string,
  ) {
    this.api = new ApiClient(baseUrl);
    this.bindControls();
  }

  async start(): Promise<void> {
    this.paint();
    try {
      this.dispatch({ kind: "sandboxes", ids: await this.api.sandboxes() });
    } catch {
      // endpoints may not be up yet; the stream reconnect will populate us
    }
    if (this.state.selected) await this.refreshSelected();
    await this.pollStats();
    this.statsTimer = setInterval(() => void this.pollStats(), STATS_POLL_MS);
    this.stream = new StreamClient(this.api.baseUrl, {
      sandbox: "all",
      onMessage: (msg) => {
        this.dispatch({ kind: "stream", message: msg });
        if (msg.type !== "command" || msg.data.sandbox_id === this.state.selected) {
          this.scheduleRefresh();
        }
      },
      onStatus: (state) => this.dispatch({ kind: "connection", state }),
    });
    this.stream.start();
  }

  stop(): void {
    this.stream?.close();
    if (this.statsTimer) clearInterval(this.statsTimer);
    if (this.refreshTimer) clearTimeout(this.refreshTimer);
  }

  dispatch(action: Action): void {
    const next = reduce(this.state, action);
    if (next === this.state) return;
    const selectionChanged = next.selected !== this.state.selected;
    this.state = next;
    if (selectionChanged) void this.refreshSelected();
    // paused: keep absorbing stream state but freeze the rendered view
    if (this.state.live || action.kind !== "stream") this.paint();
  }

  private paint(): void {
    this.root.replaceChildren(renderApp(this.state));
  }

  private async refreshSelected(): Promise<void> {
    const sandbox = this.state.selected;
    if (!sandbox) return;
    try {
      const [timeline, findings, progress] = await Promise.all([
        this.api.timeline(sandbox),
        this.api.findings(sandbox),
        this.api.progress(sandbox).catch(() => null),
      ]);
      this.dispatch({ kind: "timeline", sandbox, events: timeline });
      this.dispatch({ kind: "findings", sandbox, findings });
      this.dispatch({ kind: "progress", sandbox, graph: progress });
    } catch {
      // transient fetch failure; the next stream event retries
    }
  }

  private scheduleRefresh(): void {
    if (this.refreshTimer) clearTimeout(this.refreshTimer);
    this.refreshTimer = setTimeout(() => void this.refreshSelected(), REFRESH_DEBOUNCE_MS);
  }

  private async pollStats(): Promise<void> {
    try {
      this.dispatch({ kind: "stats", stats: await this.api.stats() });
    } catch {
      // stats panel simply keeps its last value
    }
  }

  private bindControls(): void {
    this.root.addEventListener("change", (ev) => {
      const target = ev.target as HTMLElement;
      if (target.classList.contains("sandbox-picker")) {
        this.dispatch({ kind: "select", sandbox: (target as HTMLSelectElement).value });
      }
    });
    this.root.addEventListener("click", (ev) => {
      const target = ev.target as HTMLElement;
      if (target.dataset.filter) {
        this.dispatch({
          kind: "filter",
          filter: target.dataset.filter as ViewState["filter"],
        });
      } else if (target.classList.contains("live-toggle")) {
        this.dispatch({ kind: "live", live: !this.state.live });
      }
    });
  }
}

export function mount(): void {
  const root = document.getElementById("app");
  if (!root) return;
  const base = root.dataset.api ?? "";
  void new Dashboard(root, base).start();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  mount();
}

import { classify, feedFor, visibleTimeline } from "./state.js";
import type { ViewState } from "./state.js";
import type { ProgressGraph, TimelineEvent } from "./types.js";

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function empty(text: string): HTMLElement {
  return el("p", "empty", text);
}

// Every render below is a pure function of ViewState: same state in, same
// DOM out. Interaction wiring lives in app.ts, not here.

export function renderBanner(state: ViewState): HTMLElement {
  const banner = el("div", `banner banner-${state.connection}`);
  banner.dataset.state = state.connection;
  banner.textContent =
    state.connection === "live"
      ? "stream connected"
      : state.connection === "connecting"
        ? "connecting…"
        : "connection lost — retrying";
  return banner;
}

export function renderFeed(state: ViewState): HTMLElement {
  const section = el("section", "feed");
  section.appendChild(el("h2", undefined, "Live feed"));
  const records = feedFor(state, "all");
  if (!records.length) {
    section.appendChild(empty("no commands yet"));
    return section;
  }
  const list = el("ul", "feed-list");
  for (const rec of records) {
    const item = el("li", "feed-item", `[${rec.sandbox_id}] ${rec.cmd}`);
    item.dataset.sandbox = rec.sandbox_id;
    item.dataset.seq = String(rec.seq);
    item.title = `${rec.timestamp} ${rec.username}@${rec.hostname} ${rec.wd}`;
    list.appendChild(item);
  }
  section.appendChild(list);
  return section;
}

function hoverText(state: ViewState, ev: TimelineEvent): string {
  if (ev.kind === "command") {
    const cmd = String(ev.payload.cmd ?? "");
    const notes = state.findings
      .filter((f) => f.seq === ev.payload.seq)
      .map((f) => `${f.rule_id}: ${f.explanation}`);
    return [cmd, ...notes].join("\n");
  }
  if (ev.kind === "step-achieved") return `step achieved: ${ev.payload.step_id}`;
  const f = state.findings.find(
    (x) => x.seq === ev.payload.seq && x.rule_id === ev.payload.rule_id,
  );
  return f ? `${f.rule_id}: ${f.explanation}` : String(ev.payload.rule_id ?? "");
}

function label(ev: TimelineEvent): string {
  if (ev.kind === "command") return String(ev.payload.cmd ?? "");
  if (ev.kind === "step-achieved") return `✔ ${ev.payload.step_id}`;
  return `⚠ ${ev.payload.rule_id}`;
}

export function renderTimeline(state: ViewState): HTMLElement {
  const section = el("section", "timeline");
  section.appendChild(el("h2", undefined, `Timeline ${state.selected ?? ""}`.trim()));
  if (!state.selected) {
    section.appendChild(empty("no sandbox selected"));
    return section;
  }
  if (!state.timeline.length) {
    section.appendChild(empty("no activity"));
    return section;
  }
  const visible = visibleTimeline(state);
  if (!visible.length) {
    section.appendChild(empty(`no ${state.filter} events in this session`));
    return section;
  }
  const first = Date.parse(state.timeline[0].timestamp);
  const last = Date.parse(state.timeline[state.timeline.length - 1].timestamp);
  const span = Math.max(last - first, 1);
  const plot = el("ol", "plot");
  for (const ev of visible) {
    const item = el("li", `event event-${ev.kind} event-${classify(ev)}`, label(ev));
    item.dataset.kind = ev.kind;
    if (ev.correct !== null) item.dataset.correct = String(ev.correct);
    item.dataset.seq = String(ev.payload.seq ?? "");
    item.title = hoverText(state, ev);
    item.style.left = `${(100 * (Date.parse(ev.timestamp) - first)) / span}%`;
    plot.appendChild(item);
  }
  section.appendChild(plot);
  return section;
}

// Steps in prerequisite order: parents before children, declaration order
// as the tiebreak (the API already lists steps that way; sorting keeps the
// layout correct even if it ever stops doing so).
export function stepOrder(graph: ProgressGraph): string[] {
  const ids = graph.steps.map((s) => s.id);
  const pending = new Map<string, number>(ids.map((id) => [id, 0]));
  for (const [, child] of graph.edges) {
    pending.set(child, (pending.get(child) ?? 0) + 1);
  }
  const order: string[] = [];
  const ready = ids.filter((id) => pending.get(id) === 0);
  while (ready.length) {
    const id = ready.shift() as string;
    order.push(id);
    for (const [parent, child] of graph.edges) {
      if (parent !== id) continue;
      const left = (pending.get(child) ?? 0) - 1;
      pending.set(child, left);
      if (left === 0) ready.push(child);
    }
    ready.sort((a, b) => ids.indexOf(a) - ids.indexOf(b));
  }
  return order.length === ids.length ? order : ids;
}

export function renderProgress(state: ViewState): HTMLElement {
  const section = el("section", "progress");
  section.appendChild(el("h2", undefined, `Progress ${state.selected ?? ""}`.trim()));
  const graph = state.progress;
  if (!graph) {
    section.appendChild(el("p", "disabled", "progress unavailable: no scenario configured"));
    return section;
  }
  const titles = new Map(graph.steps.map((s) => [s.id, s.title]));
  const badges = new Map<string, number>();
  for (const err of graph.errors) {
    badges.set(err.step_id, (badges.get(err.step_id) ?? 0) + 1);
  }
  const list = el("ol", "steps");
  for (const id of stepOrder(graph)) {
    const status = graph.statuses[id]?.status ?? "pending";
    const node = el("li", `step step-${status}`, titles.get(id) ?? id);
    node.dataset.step = id;
    node.dataset.status = status;
    const count = badges.get(id);
    if (count) {
      const badge = el("span", "badge", String(count));
      badge.title = graph.errors
        .filter((e) => e.step_id === id)
        .map((e) => `${e.kind} (seq ${e.seq}): ${e.evidence}`)
        .join("\n");
      node.appendChild(badge);
    }
    list.appendChild(node);
  }
  section.appendChild(list);
  const counts = { achieved: 0, omitted: 0, pending: 0 };
  for (const st of Object.values(graph.statuses)) counts[st.status] += 1;
  const legend = el("p", "legend");
  for (const [name, count] of Object.entries(counts)) {
    const item = el("span", `legend-${name}`, `${name}: ${count}`);
    item.dataset.count = String(count);
    legend.appendChild(item);
  }
  section.appendChild(legend);
  return section;
}

export function renderStats(state: ViewState): HTMLElement {
  const section = el("section", "stats");
  section.appendChild(el("h2", undefined, "Cohort"));
  const stats = state.stats;
  if (!stats) {
    section.appendChild(empty("no stats yet"));
    return section;
  }
  const summary = el("p", "summary");
  const total = stats.commands.cohort.both?.total ?? 0;
  const avgGap = stats.gaps.cohort.avg_gap?.avg;
  summary.textContent =
    `${stats.sandboxes.length} sandboxes, ${total} commands` +
    (avgGap === undefined || avgGap === null ? "" : `, avg gap ${avgGap.toFixed(1)}s`);
  section.appendChild(summary);
  const table = el("table", "tools");
  for (const [tool, count] of Object.entries(stats.tool_frequency)) {
    const row = el("tr");
    row.appendChild(el("td", "tool", tool));
    row.appendChild(el("td", "count", String(count)));
    table.appendChild(row);
  }
  section.appendChild(table);
  return section;
}

export function renderControls(state: ViewState): HTMLElement {
  const bar = el("div", "controls");
  const picker = document.createElement("select");
  picker.className = "sandbox-picker";
  for (const id of state.sandboxes) {
    const option = document.createElement("option");
    option.value = id;
    option.textContent = id;
    option.selected = id === state.selected;
    picker.appendChild(option);
  }
  bar.appendChild(picker);
  for (const filter of ["all", "correct", "erroneous"] as const) {
    const button = el("button", state.filter === filter ? "filter active" : "filter", filter);
    (button as HTMLButtonElement).dataset.filter = filter;
    bar.appendChild(button);
  }
  const live = el("button", "live-toggle", state.live ? "pause" : "resume");
  live.dataset.live = String(state.live);
  bar.appendChild(live);
  return bar;
}

export function renderApp(state: ViewState): HTMLElement {
  const root = el("div", "app");
  root.appendChild(renderBanner(state));
  root.appendChild(renderControls(state));
  const panels = el("div", "panels");
  panels.appendChild(renderFeed(state));
  panels.appendChild(renderTimeline(state));
  panels.appendChild(renderProgress(state));
  panels.appendChild(renderStats(state));
  root.appendChild(panels);
  return root;
}

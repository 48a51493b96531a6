import type { ConnectionState } from "./sse.js";
import type {
  CommandRecord,
  Finding,
  ProgressGraph,
  Stats,
  StreamMessage,
  TimelineEvent,
} from "./types.js";

export type Filter = "all" | "correct" | "erroneous";

export type LiveStep = { sandbox_id: string; step_id: string; seq: number; timestamp: string };

export type ViewState = {
  sandboxes: string[];
  selected: string | null;
  filter: Filter;
  live: boolean; // paused = keep absorbing events, freeze the rendered view
  cursor: string | null; // ISO timestamp; events after it are hidden
  connection: ConnectionState;
  feed: CommandRecord[];
  liveFindings: Finding[];
  liveSteps: LiveStep[];
  timeline: TimelineEvent[]; // for `selected`
  findings: Finding[]; // for `selected`
  progress: ProgressGraph | null; // for `selected`
  stats: Stats | null;
};

export function initialState(): ViewState {
  return {
    sandboxes: [],
    selected: null,
    filter: "all",
    live: true,
    cursor: null,
    connection: "connecting",
    feed: [],
    liveFindings: [],
    liveSteps: [],
    timeline: [],
    findings: [],
    progress: null,
    stats: null,
  };
}

export type Action =
  | { kind: "sandboxes"; ids: string[] }
  | { kind: "select"; sandbox: string | null }
  | { kind: "filter"; filter: Filter }
  | { kind: "live"; live: boolean }
  | { kind: "cursor"; cursor: string | null }
  | { kind: "connection"; state: ConnectionState }
  | { kind: "stream"; message: StreamMessage }
  | { kind: "timeline"; sandbox: string; events: TimelineEvent[] }
  | { kind: "findings"; sandbox: string; findings: Finding[] }
  | { kind: "progress"; sandbox: string; graph: ProgressGraph | null }
  | { kind: "stats"; stats: Stats };

export function reduce(state: ViewState, action: Action): ViewState {
  switch (action.kind) {
    case "sandboxes": {
      const selected =
        state.selected && action.ids.includes(state.selected)
          ? state.selected
          : action.ids[0] ?? null;
      return { ...state, sandboxes: action.ids, selected };
    }
    case "select":
      if (action.sandbox === state.selected) return state;
      return { ...state, selected: action.sandbox, timeline: [], findings: [], progress: null };
    case "filter":
      return { ...state, filter: action.filter };
    case "live":
      return { ...state, live: action.live };
    case "cursor":
      return { ...state, cursor: action.cursor };
    case "connection":
      return { ...state, connection: action.state };
    case "stream":
      return applyStream(state, action.message);
    case "timeline":
      if (action.sandbox !== state.selected) return state;
      return { ...state, timeline: action.events };
    case "findings":
      if (action.sandbox !== state.selected) return state;
      return { ...state, findings: action.findings };
    case "progress":
      if (action.sandbox !== state.selected) return state;
      return { ...state, progress: action.graph };
    case "stats":
      return { ...state, stats: action.stats };
  }
}

function applyStream(state: ViewState, msg: StreamMessage): ViewState {
  if (msg.type === "command") {
    const rec = msg.data;
    // idempotent under redelivery so replaying a log reproduces the state
    if (state.feed.some((r) => r.sandbox_id === rec.sandbox_id && r.seq === rec.seq)) {
      return state;
    }
    const sandboxes = state.sandboxes.includes(rec.sandbox_id)
      ? state.sandboxes
      : [...state.sandboxes, rec.sandbox_id].sort();
    return {
      ...state,
      sandboxes,
      selected: state.selected ?? rec.sandbox_id,
      feed: [...state.feed, rec],
    };
  }
  if (msg.type === "finding") {
    const f = msg.data;
    if (state.liveFindings.some((x) => x.sandbox_id === f.sandbox_id && x.seq === f.seq && x.rule_id === f.rule_id)) {
      return state;
    }
    return { ...state, liveFindings: [...state.liveFindings, f] };
  }
  const sandbox = msg.id.slice(0, msg.id.lastIndexOf(":"));
  const step: LiveStep = { sandbox_id: sandbox, ...msg.data };
  if (state.liveSteps.some((s) => s.sandbox_id === sandbox && s.step_id === step.step_id)) {
    return state;
  }
  return { ...state, liveSteps: [...state.liveSteps, step] };
}

// A timeline event is correct (step-achieving command or the achievement
// marker itself), erroneous (carries a finding), or neutral. The three
// classes partition every event; neutral ones show only under "all".
export function classify(ev: TimelineEvent): "correct" | "erroneous" | "neutral" {
  if (ev.correct === true) return "correct";
  if (ev.correct === false) return "erroneous";
  return "neutral";
}

export function matchesFilter(ev: TimelineEvent, filter: Filter): boolean {
  if (filter === "all") return true;
  return classify(ev) === filter;
}

function beforeCursor(ev: TimelineEvent, cursor: string | null): boolean {
  if (cursor === null) return true;
  return Date.parse(ev.timestamp) <= Date.parse(cursor);
}

export function visibleTimeline(state: ViewState): TimelineEvent[] {
  return state.timeline.filter(
    (ev) => matchesFilter(ev, state.filter) && beforeCursor(ev, state.cursor),
  );
}

export function feedFor(state: ViewState, sandbox: "all" | string): CommandRecord[] {
  if (sandbox === "all") return state.feed;
  return state.feed.filter((r) => r.sandbox_id === sandbox);
}

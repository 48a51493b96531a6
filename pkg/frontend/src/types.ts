// Payload shapes of the telemetry service HTTP API. Field names must match
// the server's JSON exactly; the dashboard never reshapes them.

export type CommandRecord = {
  timestamp: string;
  username: string;
  hostname: string;
  ip: string;
  wd: string;
  cmd: string;
  cmd_type: string;
  sandbox_id: string;
  seq: number;
};

export type Severity = "info" | "warning" | "error";

export type Finding = {
  rule_id: string;
  sandbox_id: string;
  timestamp: string;
  seq: number;
  severity: Severity;
  explanation: string;
  evidence: string;
};

export type StepEvent = {
  step_id: string;
  seq: number;
  timestamp: string;
};

export type StepStatus = {
  status: "achieved" | "omitted" | "pending";
  timestamp: string | null;
  seq: number | null;
};

export type ProgressError = {
  kind: "near-miss" | "order-violation";
  timestamp: string;
  seq: number;
  step_id: string;
  rule_id: string | null;
  evidence: string;
};

export type ProgressGraph = {
  steps: { id: string; title: string }[];
  edges: [string, string][]; // [prerequisite, step]
  statuses: Record<string, StepStatus>;
  errors: ProgressError[];
};

// correct: true = step-achieving, false = carries a finding, null = neutral
export type TimelineEvent = {
  timestamp: string;
  kind: "command" | "step-achieved" | "finding";
  correct: boolean | null;
  payload: Record<string, unknown>;
};

export type CohortRow = {
  total: number;
  min: number;
  max: number;
  median: number;
  avg: number;
  stdev: number;
} | null;

export type Stats = {
  sandboxes: string[];
  commands: {
    sessions: { sandbox_id: string; bash: number; msf: number; total: number }[];
    cohort: Record<string, CohortRow>;
  };
  gaps: {
    sessions: {
      sandbox_id: string;
      duration: number;
      gaps: number[];
      median: number | null;
      avg: number | null;
      stdev: number | null;
    }[];
    cohort: { game_time: CohortRow; avg_gap: CohortRow };
  };
  tool_frequency: Record<string, number>;
};

// One parsed server-sent event from /stream.
export type StreamMessage =
  | { type: "command"; id: string; data: CommandRecord }
  | { type: "finding"; id: string; data: Finding }
  | { type: "step"; id: string; data: StepEvent };

import { execFile, spawn } from "node:child_process";
import type { ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { StreamClient } from "../src/sse.js";
import { initialState, reduce } from "../src/state.js";
import type { ViewState } from "../src/state.js";
import { renderFeed, renderTimeline } from "../src/views.js";

const run = promisify(execFile);
const HERE = path.dirname(fileURLToPath(import.meta.url));
const DATA = path.resolve(HERE, "../../src/cmdtrace/data");
const SAMPLE = path.join(DATA, "sample_session.jsonl");
const SCENARIO = path.join(DATA, "default_scenario.json");

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as { port: number }).port;
      srv.close(() => resolve(port));
    });
    srv.on("error", reject);
  });
}

async function until(cond: () => boolean, ms = 15000): Promise<void> {
  const deadline = Date.now() + ms;
  while (!cond()) {
    if (Date.now() > deadline) throw new Error("condition never became true");
    await new Promise((r) => setTimeout(r, 25));
  }
}

let storeDir: string;
let apiPort: number;
let tcpPort: number;
let udpPort: number;
let serveProc: ChildProcess | null = null;
let base: string;

function startServe(): ChildProcess {
  const child = spawn(
    "cmdtrace",
    [
      "serve",
      "--store-dir", storeDir,
      "--scenario", SCENARIO,
      "--api-port", String(apiPort),
      "--tcp-port", String(tcpPort),
      "--udp-port", String(udpPort),
      "--heartbeat", "0.5",
    ],
    { stdio: "ignore" },
  );
  return child;
}

async function waitReady(): Promise<void> {
  const deadline = Date.now() + 15000;
  for (;;) {
    try {
      const res = await fetch(`${base}/api/sandboxes`);
      if (res.ok) return;
    } catch {
      // not listening yet
    }
    if (Date.now() > deadline) throw new Error("serve never became ready");
    await new Promise((r) => setTimeout(r, 100));
  }
}

async function replay(trace: string): Promise<void> {
  const { stdout } = await run("cmdtrace", [
    "replay", trace,
    "--host", "127.0.0.1",
    "--port", String(tcpPort),
    "--transport", "tcp",
    "--speed", "max",
  ]);
  expect(stdout).toContain("(failed 0)");
}

function errRecord(seq: number, cmd: string): string {
  const ts = new Date(Date.UTC(2020, 6, 3, 9, 0, 30 * (seq - 1)))
    .toISOString()
    .replace(".000Z", "+00:00");
  return JSON.stringify({
    timestamp: ts,
    username: "student",
    hostname: "kali",
    ip: "172.18.1.9",
    wd: "/home/student",
    cmd,
    cmd_type: "bash-command",
    sandbox_id: "err1",
  });
}

const ERR_CMDS = [
  "nmap --help",
  "nmap -sn 172.18.1.0/24",
  "nmap -sV -p 10000 172.18.1.5",
  "ls -la",
  "cat notes.txt",
  "pwd",
];

beforeAll(async () => {
  storeDir = mkdtempSync(path.join(tmpdir(), "cmdtrace-dash-"));
  [apiPort, tcpPort, udpPort] = [await freePort(), await freePort(), await freePort()];
  base = `http://127.0.0.1:${apiPort}`;
  serveProc = startServe();
  await waitReady();
});

afterAll(() => {
  serveProc?.kill("SIGKILL");
  rmSync(storeDir, { recursive: true, force: true });
});

describe("dashboard against a live service", () => {
  it("feed shows all 7 replayed commands in order", async () => {
    let state = initialState();
    const client = new StreamClient(base, {
      sandbox: "1",
      onMessage: (message) => {
        state = reduce(state, { kind: "stream", message });
      },
      retryDelayMs: 100,
    });
    client.start();
    await new Promise((r) => setTimeout(r, 300)); // let the stream subscribe
    await replay(SAMPLE);
    await until(() => state.feed.length === 7);
    client.close();

    const items = [...renderFeed(state).querySelectorAll("li")];
    expect(items).toHaveLength(7);
    expect(items.map((li) => li.dataset.seq)).toEqual(["1", "2", "3", "4", "5", "6", "7"]);
    expect(items[items.length - 1].textContent).toBe("[1] nmap -sV -p 10000 172.18.1.5");
    expect(client.gaps().get("1") ?? []).toEqual([]);
  });

  it("filter=erroneous hides correctness=true events in the DOM", async () => {
    const trace = ERR_CMDS.slice(0, 3).map((cmd, i) => errRecord(i + 1, cmd));
    const tracePath = path.join(storeDir, "err1.jsonl");
    writeFileSync(tracePath, trace.join("\n") + "\n");
    await replay(tracePath);

    const api = new ApiClient(base);
    const events = await api.timeline("err1");
    let state: ViewState = reduce(initialState(), { kind: "select", sandbox: "err1" });
    state = reduce(state, { kind: "timeline", sandbox: "err1", events });

    const all = renderTimeline({ ...state, filter: "all" });
    expect(all.querySelectorAll('[data-correct="true"]').length).toBeGreaterThan(0);
    expect(all.querySelectorAll('[data-correct="false"]').length).toBeGreaterThan(0);

    const erroneous = renderTimeline({ ...state, filter: "erroneous" });
    expect(erroneous.querySelectorAll('[data-correct="true"]')).toHaveLength(0);
    const shown = [...erroneous.querySelectorAll(".event")];
    expect(shown.length).toBeGreaterThan(0);
    for (const node of shown) expect(node.getAttribute("data-correct")).toBe("false");

    const correctOnly = renderTimeline({ ...state, filter: "correct" });
    expect(correctOnly.querySelectorAll('[data-correct="false"]')).toHaveLength(0);
  });

  it("stream reconnect after a server restart shows no sequence gaps", async () => {
    let state = initialState();
    const statuses: string[] = [];
    const client = new StreamClient(base, {
      sandbox: "err1",
      onMessage: (message) => {
        state = reduce(state, { kind: "stream", message });
      },
      onStatus: (s) => statuses.push(s),
      retryDelayMs: 100,
    });
    client.start();
    await until(() => state.feed.length === 3); // catch-up of the stored session

    serveProc?.kill("SIGKILL");
    await until(() => statuses.includes("lost"));
    serveProc = startServe();
    await waitReady();

    const extended = ERR_CMDS.map((cmd, i) => errRecord(i + 1, cmd));
    const tracePath = path.join(storeDir, "err1-more.jsonl");
    writeFileSync(tracePath, extended.join("\n") + "\n");
    await replay(tracePath); // first three deduplicate, three arrive as news

    await until(() => state.feed.length === 6);
    client.close();

    expect(statuses[statuses.length - 1]).toBe("live");
    expect(client.gaps().get("err1") ?? []).toEqual([]);
    expect(state.feed.map((r) => r.seq)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(state.feed.map((r) => r.cmd)).toEqual(ERR_CMDS);
  });
});

import { describe, expect, it } from "vitest";

import { ConsoleStore } from "../src/store.js";
import {
  renderBanner,
  renderInbox,
  renderQueues,
  renderTree,
} from "../src/views.js";
import type { JobDoc, RecordDoc } from "../src/types.js";

function record(uuid: string, parent: string | null, name: string,
                extra: Partial<RecordDoc> = {}): RecordDoc {
  return {
    uuid, parent, name, kind: "Resource", category: null, pose: null,
    dims: null, config: {}, data: {}, extra: {}, schedulable: true,
    ...extra,
  };
}

function bigStore(nodes: number): ConsoleStore {
  const store = new ConsoleStore();
  const records: RecordDoc[] = [record("root", null, "lab")];
  for (let i = 1; i < nodes; i++) {
    const parent = i < 20 ? "root" : `n${(i % 19) + 1}`;
    records.push(record(`n${i}`, parent, `node_${i}`,
                        { data: { volume_ul: i } }));
  }
  store.loadSnapshot({ snapshot_hash: "0".repeat(64), records });
  return store;
}

describe("tree view", () => {
  it("renders 500 nodes inside the frame budget and stays interactive", () => {
    const store = bigStore(500);
    const expanded = new Set<string>();
    for (const r of store.records.keys()) expanded.add(r); // fully open

    const t0 = performance.now();
    const tree = renderTree(document, store, expanded);
    const renderMs = performance.now() - t0;
    expect(tree.querySelectorAll(".tree-node").length).toBe(500);
    // jsdom is far slower than a browser; 250 ms here is well within a
    // real frame budget
    expect(renderMs).toBeLessThan(250);

    // interaction: collapsing a branch re-renders quickly too
    const t1 = performance.now();
    expanded.delete("n1");
    const tree2 = renderTree(document, store, expanded);
    expect(performance.now() - t1).toBeLessThan(250);
    expect(tree2.querySelectorAll(".tree-node").length).toBeLessThan(500);
  });

  it("badges kinds and dims archived subtrees", () => {
    const store = new ConsoleStore();
    store.loadSnapshot({
      snapshot_hash: "0".repeat(64),
      records: [
        record("root", null, "lab"),
        record("trash", "root", "__trash__", { schedulable: false }),
        record("pump", "root", "pump",
               { kind: "Action", category: "connector" }),
        record("heater", "root", "heater", { kind: "ActionResource" }),
      ],
    });
    const expanded = new Set<string>(["root"]);
    const tree = renderTree(document, store, expanded);
    const badges = [...tree.querySelectorAll(".badge")].map(
      (b) => b.textContent);
    expect(badges).toContain("A");
    expect(badges).toContain("A&R");
    expect(badges).toContain("connector");
    const archived = tree.querySelector(".tree-node.archived");
    expect(archived).not.toBeNull();
    expect(archived!.textContent).toContain("__trash__");
  });
});

describe("queue and inbox panels", () => {
  function jobEvent(journalSeq: number, jobId: string, state: string,
                    holdReason: string | null = null) {
    return {
      kind: "job" as const,
      data: {
        journal_seq: journalSeq, job_id: jobId, group_id: "g",
        target: "assembly", capability: "run_step", state,
        depends_on: [], hold_reason: holdReason, extra: {},
      } as JobDoc,
    };
  }

  it("renders per-node queues with paused markers", () => {
    const store = new ConsoleStore();
    store.apply(jobEvent(1, "a1", "blocked", "node_lost"));
    store.apply(jobEvent(2, "a2", "succeeded"));
    const queues = renderQueues(document, store);
    const panel = queues.querySelector('.queue[data-target="assembly"]')!;
    expect(panel.querySelector("h3")!.textContent).toContain("⏸");
    expect(panel.querySelectorAll(".job").length).toBe(2);
  });

  it("inbox buttons call the decision handler; no local mutation", () => {
    const store = new ConsoleStore();
    store.apply(jobEvent(1, "j1", "awaiting_approval"));
    const decisions: string[] = [];
    const inbox = renderInbox(document, store, (job, decision) => {
      decisions.push(`${job.job_id}:${decision}`);
    });
    expect(inbox.querySelector(".inbox-badge")!.textContent).toBe("1");
    (inbox.querySelector("button.approve") as HTMLButtonElement).click();
    expect(decisions).toEqual(["j1:approve"]);
    // optimistic UI is forbidden: state changes only on a server event
    expect(store.awaitingApproval().length).toBe(1);
    store.apply(jobEvent(2, "j1", "pending"));
    expect(store.awaitingApproval().length).toBe(0);
  });
});

describe("banner", () => {
  it("shows a degraded banner with a timestamp on connection loss", () => {
    const store = new ConsoleStore();
    store.apply({
      kind: "crutd",
      data: {
        journal_seq: 1, seq: 1, outcome: "committed",
        request: { op: "Create", subject: null, actor: "t" },
        delta: [], touched: [], sim_time: 0,
      },
    });
    store.setDegraded(true);
    const banner = renderBanner(document, store);
    expect(banner.className).toContain("degraded");
    expect(banner.textContent).toMatch(/retrying/);
    expect(banner.textContent).toMatch(/\d{4}-\d{2}-\d{2}T/); // visible stamp
  });
});

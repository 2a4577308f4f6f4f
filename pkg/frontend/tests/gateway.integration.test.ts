/** End-to-end against a real sim gateway: spawn the python service, drive
 * the console's store exactly as the browser would, approve an awaiting job,
 * and require the queue transition to arrive with the very next job event. */

import { spawn, type ChildProcess } from "node:child_process";
import { createServer } from "node:net";
import { resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GatewayClient } from "../src/client.js";
import { ConsoleStore } from "../src/store.js";
import type { JournalEvent } from "../src/types.js";

const REPO_ROOT = resolve(__dirname, "../..");
const SCENARIO = resolve(
  REPO_ROOT, "fixtures/scenarios/demo_gateway.scenario.json");

function freePort(): Promise<number> {
  return new Promise((done, fail) => {
    const server = createServer();
    server.listen(0, "127.0.0.1", () => {
      const port = (server.address() as { port: number }).port;
      server.close(() => done(port));
    });
    server.on("error", fail);
  });
}

async function waitHealthy(client: GatewayClient, timeoutMs: number) {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      await client.health();
      return;
    } catch {
      if (Date.now() > deadline) throw new Error("gateway never came up");
      await new Promise((r) => setTimeout(r, 200));
    }
  }
}

let gateway: ChildProcess;
let base: string;

beforeAll(async () => {
  const port = await freePort();
  base = `http://127.0.0.1:${port}`;
  gateway = spawn(
    "python3",
    ["-m", "labkernel.gateway", "--scenario", SCENARIO,
     "--port", String(port)],
    { cwd: REPO_ROOT, stdio: ["ignore", "pipe", "pipe"] },
  );
  await waitHealthy(new GatewayClient(base, "viewer-token"), 30000);
});

afterAll(() => {
  gateway?.kill("SIGTERM");
});

describe("console against a live sim gateway", () => {
  it("approves an awaiting job and sees the transition within one event", async () => {
    const operator = new GatewayClient(base, "operator-token");
    const store = new ConsoleStore();
    store.loadSnapshot(await operator.snapshot());
    expect(store.records.size).toBeGreaterThan(20);

    const journal: JournalEvent[] = [];
    let streamingActive = true;
    const streaming = (async () => {
      // keep re-attaching like the browser loop does
      while (streamingActive) {
        await operator.stream(
          store.lastJournalSeq,
          (event) => {
            journal.push(event);
            store.apply(event);
          },
          { follow: true, timeoutS: 2 },
        );
      }
    })();

    // a "remove" step requires approval under the demo policy
    await operator.submitGroup({
      protocol: {
        steps: [
          { verb: "add", args: { src: "reagent_trough", dst: "B1", volume_ul: 150 } },
          { verb: "remove", args: { src: "B1", dst: "waste_trough", volume_ul: 40 } },
        ],
      },
    });

    const waitFor = async (pred: () => boolean, what: string) => {
      const deadline = Date.now() + 30000;
      while (!pred()) {
        if (Date.now() > deadline) throw new Error(`timed out: ${what}`);
        await new Promise((r) => setTimeout(r, 50));
      }
    };

    await waitFor(() => store.awaitingApproval().length === 1,
                  "job awaiting approval");
    const waiting = store.awaitingApproval()[0];
    expect(waiting.capability).toBe("remove");

    const seenBeforeApproval = journal.length;
    await operator.approve(waiting.job_id, "approve", "alice");
    await waitFor(
      () => journal.slice(seenBeforeApproval).some(
        (e) => e.kind === "job" && e.data.job_id === waiting.job_id),
      "post-approval job event");

    // the first job event for this job after approving IS the transition
    const firstAfter = journal
      .slice(seenBeforeApproval)
      .filter((e) => e.kind === "job" && e.data.job_id === waiting.job_id)[0];
    expect(firstAfter.kind).toBe("job");
    expect((firstAfter.data as { state: string }).state).toBe("pending");
    expect(store.awaitingApproval().length).toBe(0);

    // and the job runs to completion, observed purely through the stream
    await waitFor(
      () => store.jobs.get(waiting.job_id)?.state === "succeeded",
      "approved job success");

    // read-path purity: the tree reflects the committed transfers
    await waitFor(() => {
      const b1 = [...store.records.values()].find((r) => r.name === "B1");
      return b1?.data.volume_ul === 110;
    }, "tree updated from the event stream");

    streamingActive = false;
    await streaming.catch(() => undefined);
  }, 120000);
});

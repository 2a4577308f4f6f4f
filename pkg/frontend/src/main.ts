/** Browser entry: wire the store, the event stream, and the panels. */

import { GatewayClient } from "./client.js";
import { ConsoleStore } from "./store.js";
import {
  renderBanner,
  renderInbox,
  renderQueues,
  renderTicker,
  renderTree,
} from "./views.js";

const params = new URLSearchParams(location.search);
const gateway = params.get("gateway") ?? "http://127.0.0.1:8099";
const token = params.get("token") ?? "operator-token";
const approver = params.get("approver") ?? "operator";

const client = new GatewayClient(gateway, token);
const store = new ConsoleStore();
const expanded = new Set<string>();

function panel(id: string): HTMLElement {
  return document.getElementById(id)!;
}

function redraw(): void {
  panel("banner").replaceChildren(renderBanner(document, store));
  panel("tree").replaceChildren(renderTree(document, store, expanded));
  panel("queues").replaceChildren(renderQueues(document, store));
  panel("inbox").replaceChildren(
    renderInbox(document, store, (job, decision) => {
      // no optimistic update: the queue panel moves when the event arrives
      client.approve(job.job_id, decision, approver).catch((err) => {
        console.error("approval failed", err);
      });
    }),
  );
  panel("ticker").replaceChildren(renderTicker(document, store));
}

let redrawQueued = false;
store.subscribe(() => {
  if (redrawQueued) return;
  redrawQueued = true;
  requestAnimationFrame(() => {
    redrawQueued = false;
    redraw();
  });
});
document.addEventListener("tree-toggle", redraw);

async function run(): Promise<void> {
  store.loadSnapshot(await client.snapshot());
  for (;;) {
    try {
      store.setDegraded(false);
      await client.stream(store.lastJournalSeq, (event) => store.apply(event), {
        follow: true,
        timeoutS: 25,
      });
    } catch (err) {
      console.warn("stream dropped", err);
      store.setDegraded(true);
      await new Promise((resolve) => setTimeout(resolve, 1000));
    }
  }
}

run().catch((err) => {
  store.setDegraded(true);
  console.error("console failed to start", err);
});

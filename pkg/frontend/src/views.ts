/** DOM renderers. Pure functions from store state to elements; the caller
 * owns scheduling. Collapse state survives re-render via a shared set. */

import type { ConsoleStore } from "./store.js";
import type { JobDoc, RecordDoc } from "./types.js";

const KIND_BADGE: Record<RecordDoc["kind"], string> = {
  Resource: "R",
  Action: "A",
  ActionResource: "A&R",
};

export function renderTree(
  doc: Document,
  store: ConsoleStore,
  expanded: Set<string>,
): HTMLElement {
  const container = doc.createElement("div");
  container.className = "tree";

  const renderNode = (record: RecordDoc, depth: number): HTMLElement => {
    const node = doc.createElement("div");
    node.className = "tree-node";
    node.dataset.uuid = record.uuid;
    if (!record.schedulable) node.classList.add("archived");

    const row = doc.createElement("div");
    row.className = "tree-row";
    row.style.paddingLeft = `${depth * 14}px`;
    const children = store.childrenOf(record.uuid);

    const toggle = doc.createElement("span");
    toggle.className = "toggle";
    toggle.textContent = children.length
      ? expanded.has(record.uuid)
        ? "▾"
        : "▸"
      : "·";
    if (children.length) {
      toggle.addEventListener("click", () => {
        if (expanded.has(record.uuid)) expanded.delete(record.uuid);
        else expanded.add(record.uuid);
        node.dispatchEvent(new doc.defaultView!.Event("tree-toggle",
          { bubbles: true }));
      });
    }
    row.appendChild(toggle);

    const badge = doc.createElement("span");
    badge.className = `badge kind-${record.kind}`;
    badge.textContent = KIND_BADGE[record.kind];
    row.appendChild(badge);

    if (record.category) {
      const category = doc.createElement("span");
      category.className = "badge category";
      category.textContent = record.category;
      row.appendChild(category);
    }

    const label = doc.createElement("span");
    label.className = "name";
    label.textContent = record.name || "(unnamed)";
    row.appendChild(label);

    const volume = record.data["volume_ul"];
    if (typeof volume === "number") {
      const vol = doc.createElement("span");
      vol.className = "volume";
      vol.textContent = `${volume} µL`;
      row.appendChild(vol);
    }
    node.appendChild(row);

    if (children.length && expanded.has(record.uuid)) {
      for (const child of children) {
        node.appendChild(renderNode(child, depth + 1));
      }
    }
    return node;
  };

  for (const root of store.childrenOf(null)) {
    expanded.add(root.uuid); // roots start open
    container.appendChild(renderNode(root, 0));
  }
  return container;
}

export function renderQueues(doc: Document, store: ConsoleStore): HTMLElement {
  const container = doc.createElement("div");
  container.className = "queues";
  for (const [target, jobs] of [...store.queues().entries()].sort()) {
    const panel = doc.createElement("div");
    panel.className = "queue";
    panel.dataset.target = target;
    const heading = doc.createElement("h3");
    const paused = jobs.some((j) => j.hold_reason === "node_lost");
    heading.textContent = paused ? `${target} ⏸` : target;
    panel.appendChild(heading);
    for (const job of jobs) {
      const row = doc.createElement("div");
      row.className = `job state-${job.state}`;
      row.dataset.jobId = job.job_id;
      row.textContent = `${job.job_id} · ${job.capability} · ${job.state}` +
        (job.hold_reason ? ` (${job.hold_reason})` : "");
      panel.appendChild(row);
    }
    container.appendChild(panel);
  }
  return container;
}

export function renderInbox(
  doc: Document,
  store: ConsoleStore,
  onDecision: (job: JobDoc, decision: "approve" | "reject") => void,
): HTMLElement {
  const container = doc.createElement("div");
  container.className = "inbox";
  const waiting = store.awaitingApproval();
  const badge = doc.createElement("span");
  badge.className = "inbox-badge";
  badge.textContent = String(waiting.length);
  container.appendChild(badge);
  for (const job of waiting) {
    const row = doc.createElement("div");
    row.className = "approval";
    row.dataset.jobId = job.job_id;
    const label = doc.createElement("span");
    label.textContent = `${job.job_id}: ${job.capability} on ${job.target}`;
    row.appendChild(label);
    for (const decision of ["approve", "reject"] as const) {
      const button = doc.createElement("button");
      button.className = decision;
      button.textContent = decision;
      button.addEventListener("click", () => onDecision(job, decision));
      row.appendChild(button);
    }
    container.appendChild(row);
  }
  return container;
}

export function renderTicker(doc: Document, store: ConsoleStore,
                             limit = 30): HTMLElement {
  const container = doc.createElement("div");
  container.className = "ticker";
  for (const event of store.ticker.slice(-limit).reverse()) {
    const row = doc.createElement("div");
    row.className = `event ${event.outcome}`;
    row.textContent =
      `#${event.seq} ${event.request.op} ${event.outcome} ` +
      `@${event.sim_time.toFixed(1)}s`;
    container.appendChild(row);
  }
  return container;
}

export function renderBanner(doc: Document, store: ConsoleStore): HTMLElement {
  const banner = doc.createElement("div");
  banner.className = store.degraded ? "banner degraded" : "banner ok";
  if (store.degraded) {
    const stamp = store.lastEventAt
      ? new Date(store.lastEventAt).toISOString()
      : "never";
    banner.textContent = `connection lost — retrying (last event ${stamp})`;
  } else {
    banner.textContent = "live";
  }
  return banner;
}

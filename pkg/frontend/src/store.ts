/** Console state: a thin projection of the gateway's journal.
 *
 * Every fact here originates from a GET snapshot or an event-stream message,
 * applied strictly in journal order — the console can never disagree with
 * the kernel because it replays the same deltas the kernel logged. No
 * optimistic updates: approvals mutate nothing locally until the job event
 * confirming the transition arrives.
 */

import type {
  CrutdEventDoc,
  DeltaOp,
  JobDoc,
  JournalEvent,
  RecordDoc,
  SnapshotDoc,
} from "./types.js";

export type Listener = () => void;

export class ConsoleStore {
  records = new Map<string, RecordDoc>();
  jobs = new Map<string, JobDoc>();
  ticker: CrutdEventDoc[] = [];
  lastJournalSeq = 0;
  lastEventAt: number | null = null;
  degraded = false;
  private listeners: Listener[] = [];

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  loadSnapshot(snapshot: SnapshotDoc): void {
    this.records.clear();
    for (const record of snapshot.records) {
      this.records.set(record.uuid, { ...record });
    }
    this.notify();
  }

  apply(event: JournalEvent): void {
    const seq = event.data.journal_seq;
    if (seq <= this.lastJournalSeq) return; // replayed duplicates are no-ops
    this.lastJournalSeq = seq;
    this.lastEventAt = Date.now();
    if (event.kind === "crutd") {
      if (event.data.outcome === "committed") {
        for (const op of event.data.delta) this.applyDelta(op);
      }
      this.ticker.push(event.data);
      if (this.ticker.length > 500) this.ticker.shift();
    } else {
      this.jobs.set(event.data.job_id, { ...event.data });
    }
    this.notify();
  }

  private applyDelta(op: DeltaOp): void {
    switch (op[0]) {
      case "insert":
        this.records.set(op[1].uuid, { ...op[1] });
        break;
      case "set_field": {
        const record = this.records.get(op[1]);
        if (record) record[op[2]][op[3]] = op[4];
        break;
      }
      case "reparent": {
        const record = this.records.get(op[1]);
        if (record) record.parent = op[2];
        break;
      }
      case "set_schedulable": {
        const record = this.records.get(op[1]);
        if (record) record.schedulable = op[2];
        break;
      }
      case "set_pose": {
        const record = this.records.get(op[1]);
        if (record) record.pose = op[2];
        break;
      }
    }
  }

  setDegraded(flag: boolean): void {
    if (this.degraded !== flag) {
      this.degraded = flag;
      this.notify();
    }
  }

  /** Children uuids in stable insertion order. */
  childrenOf(uuid: string | null): RecordDoc[] {
    const out: RecordDoc[] = [];
    for (const record of this.records.values()) {
      if (record.parent === uuid || (uuid === null && record.parent === null)) {
        out.push(record);
      }
    }
    return out;
  }

  awaitingApproval(): JobDoc[] {
    return [...this.jobs.values()]
      .filter((j) => j.state === "awaiting_approval")
      .sort((a, b) => a.job_id.localeCompare(b.job_id));
  }

  queues(): Map<string, JobDoc[]> {
    const byTarget = new Map<string, JobDoc[]>();
    for (const job of this.jobs.values()) {
      const queue = byTarget.get(job.target) ?? [];
      queue.push(job);
      byTarget.set(job.target, queue);
    }
    for (const queue of byTarget.values()) {
      queue.sort((a, b) => a.job_id.localeCompare(b.job_id));
    }
    return byTarget;
  }
}

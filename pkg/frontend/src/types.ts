/** Payload shapes exchanged with the gateway. */

export interface PoseDoc {
  frame: string;
  position: number[];
  orientation: number[];
  known: boolean;
}

export interface RecordDoc {
  uuid: string;
  parent: string | null;
  name: string;
  kind: "Resource" | "Action" | "ActionResource";
  category: string | null;
  pose: PoseDoc | null;
  dims: number[] | null;
  config: Record<string, unknown>;
  data: Record<string, unknown>;
  extra: Record<string, unknown>;
  schedulable: boolean;
}

export interface SnapshotDoc {
  snapshot_hash: string;
  records: RecordDoc[];
}

/** Delta primitives inside committed events, mirrored from the kernel log. */
export type DeltaOp =
  | ["insert", RecordDoc]
  | ["set_field", string, "config" | "data" | "extra", string, unknown]
  | ["reparent", string, string]
  | ["set_schedulable", string, boolean]
  | ["set_pose", string, PoseDoc | null];

export interface CrutdEventDoc {
  journal_seq: number;
  seq: number;
  outcome: "committed" | "rolled_back";
  request: { op: string; subject: string | null; actor: string };
  delta: DeltaOp[];
  touched: string[];
  sim_time: number;
}

export interface JobDoc {
  journal_seq: number;
  job_id: string;
  group_id: string;
  target: string;
  capability: string;
  state: string;
  depends_on: string[];
  hold_reason: string | null;
  extra: Record<string, unknown>;
}

export type JournalEvent =
  | { kind: "crutd"; data: CrutdEventDoc }
  | { kind: "job"; data: JobDoc };

export interface EdgeDoc {
  edge_id: string;
  endpoints: [string, string];
  medium: string;
  directed: boolean;
  attrs: Record<string, unknown>;
}

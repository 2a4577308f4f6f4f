"""Intent-to-execution pipeline on the host.

Task groups become jobs in per-device queues. Before any frame reaches a
device, a job passes pre-dispatch validation against the digital twin:
volume/capacity tracking on a cloned store plus an axis-aligned-box sweep
for moves with poses. Heartbeat loss pauses exactly the affected queue and
blocks dependents; reconnection triggers a field-level resync (host wins
config, node wins data, extra is unioned) before the queue resumes.

Every physical job couples a CRUTD transaction to its goal: begin at
dispatch, commit with the device's confirmation, roll back on failure.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

from .crutd import CrutdEngine, CrutdRequest, Transaction
from .errors import (
    CyclicDependencies,
    LabError,
    NotAwaitingApproval,
    PolicyViolation,
    ResyncDiverged,
    UnknownTarget,
)
from .host import HostNode
from .resources import Pose, ResourceStore

JOB_STATES = ("pending", "awaiting_approval", "dispatched", "running",
              "succeeded", "failed", "cancelled", "blocked")
TERMINAL_JOB_STATES = ("succeeded", "failed", "cancelled")


@dataclass
class Policy:
    approval_required: tuple[str, ...] = ()
    operators: tuple[str, ...] = ("operator",)
    action_timeout: float = 10.0
    tick_period: float = 1.0
    service_timeout: float = 5.0


@dataclass
class Job:
    job_id: str
    group_id: str
    target: str  # bus node id ("host" for purely digital work)
    capability: str
    params: dict[str, Any] = field(default_factory=dict)
    kind: str = "action"  # action | service | digital
    state: str = "pending"
    depends_on: list[str] = field(default_factory=list)
    crutd: dict[str, Any] | None = None
    crutd_refs: list[int] = field(default_factory=list)
    motion: dict[str, Any] | None = None
    hold_reason: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id, "group_id": self.group_id,
            "target": self.target, "capability": self.capability,
            "params": self.params, "kind": self.kind, "state": self.state,
            "depends_on": self.depends_on, "crutd": self.crutd,
            "crutd_refs": self.crutd_refs, "motion": self.motion,
            "hold_reason": self.hold_reason, "extra": self.extra,
        }


@dataclass
class TaskGroup:
    group_id: str
    submitted_by: str
    job_ids: list[str] = field(default_factory=list)

    def status(self, jobs: dict[str, Job]) -> str:
        states = [jobs[j].state for j in self.job_ids]
        if all(s == "succeeded" for s in states):
            return "completed"
        if any(s in ("failed", "cancelled") for s in states):
            return "degraded"
        if any(s in ("dispatched", "running") for s in states):
            return "running"
        return "pending"


@dataclass
class NodeQueue:
    node_id: str
    job_ids: list[str] = field(default_factory=list)
    paused: bool = False
    dispatched_history: list[str] = field(default_factory=list)


@dataclass
class ResyncReport:
    node_id: str
    in_sync: bool
    adopted: list[tuple[str, str, str]] = field(default_factory=list)
    conflicts: list[dict[str, Any]] = field(default_factory=list)
    host_hash: str = ""
    node_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"node_id": self.node_id, "in_sync": self.in_sync,
                "adopted": [list(a) for a in self.adopted],
                "conflicts": self.conflicts,
                "host_hash": self.host_hash, "node_hash": self.node_hash}


# -- geometric look-ahead -------------------------------------------------------

MOTION_STEPS = 32


def _aabb(center: tuple[float, float, float],
          dims: tuple[float, float, float]) -> tuple[tuple[float, float], ...]:
    return tuple((c - d / 2.0, c + d / 2.0) for c, d in zip(center, dims))


def boxes_overlap(a: tuple, b: tuple) -> bool:
    return all(lo_a < hi_b and lo_b < hi_a
               for (lo_a, hi_a), (lo_b, hi_b) in zip(a, b))


def sweep_collides(start: tuple[float, float, float],
                   end: tuple[float, float, float],
                   dims: tuple[float, float, float],
                   obstacles: list[tuple[tuple, str]],
                   steps: int = MOTION_STEPS) -> str | None:
    """Straight-line interpolation in ``steps`` increments; returns the first
    colliding obstacle uuid, or None."""
    for i in range(steps + 1):
        t = i / steps
        center = tuple(s + (e - s) * t for s, e in zip(start, end))
        box = _aabb(center, dims)
        for obstacle_box, uid in obstacles:
            if boxes_overlap(box, obstacle_box):
                return uid
    return None


class Orchestrator:
    """Single serialized loop consuming bus callbacks, timer sweeps, and
    gateway commands."""

    def __init__(self, host: HostNode, policy: Policy | None = None) -> None:
        self.host = host
        self.engine: CrutdEngine = host.engine
        self.store: ResourceStore = host.store
        self.network = host.network
        self.policy = policy or Policy()
        self.jobs: dict[str, Job] = {}
        self.groups: dict[str, TaskGroup] = {}
        self.queues: dict[str, NodeQueue] = {}
        self.inflight: dict[str, str] = {}  # node_id -> job_id
        self.resyncing: set[str] = set()
        self.resync_reports: list[ResyncReport] = []
        self.liveness_log: list[tuple[float, str, str]] = []
        self.pause_log: list[tuple[float, str, bool]] = []
        self._handles: dict[str, Any] = {}  # job_id -> ActionExecution
        self.on_job_change: Callable[[Job], None] | None = None
        self._txns: dict[str, Transaction] = {}
        self._ids = itertools.count(1)
        host.on_liveness_change = self.on_liveness_change
        self.network.every(self.policy.tick_period, self.tick,
                           owner=host.node_id)

    # -- submission -----------------------------------------------------------------

    def _resolve_target(self, target: str) -> str:
        if target == self.host.node_id or target in self.host.registry:
            return target
        if target in self.host.device_node_of:
            return self.host.device_node_of[target]
        raise UnknownTarget(f"target {target!r} is not admitted or declared",
                            subject=target)

    def submit(self, group_spec: dict[str, Any]) -> str:
        group_id = group_spec.get("group_id") or f"grp-{next(self._ids)}"
        submitted_by = group_spec.get("submitted_by", "operator")
        jobs: list[Job] = []
        ids_in_group = set()
        for j in group_spec.get("jobs", []):
            job_id = j.get("job_id") or f"{group_id}-j{len(jobs) + 1}"
            target = self._resolve_target(j["target"])
            job = Job(job_id=job_id, group_id=group_id, target=target,
                      capability=j.get("capability", ""),
                      params=dict(j.get("params", {})),
                      kind=j.get("kind", "action"),
                      depends_on=list(j.get("depends_on", [])),
                      crutd=j.get("crutd"), motion=j.get("motion"),
                      extra=dict(j.get("extra", {})))
            jobs.append(job)
            ids_in_group.add(job_id)

        # dependency graph must be acyclic (within known jobs)
        adjacency = {j.job_id: [d for d in j.depends_on if d in ids_in_group]
                     for j in jobs}
        seen: dict[str, int] = {}

        def visit(jid: str) -> None:
            state = seen.get(jid, 0)
            if state == 1:
                raise CyclicDependencies(f"cycle through job {jid}", subject=jid)
            if state == 2:
                return
            seen[jid] = 1
            for dep in adjacency.get(jid, ()):
                visit(dep)
            seen[jid] = 2

        for j in jobs:
            visit(j.job_id)

        group = TaskGroup(group_id=group_id, submitted_by=submitted_by,
                          job_ids=[j.job_id for j in jobs])
        self.groups[group_id] = group
        for job in jobs:
            if job.capability in self.policy.approval_required:
                job.state = "awaiting_approval"
            self.jobs[job.job_id] = job
            queue = self.queues.setdefault(job.target, NodeQueue(job.target))
            queue.job_ids.append(job.job_id)
            self._notify(job)
        self.network.schedule(0.0, self.tick)
        return group_id

    def _notify(self, job: Job) -> None:
        if self.on_job_change is not None:
            self.on_job_change(job)

    def _set_state(self, job: Job, state: str, reason: str | None = None) -> None:
        job.state = state
        job.hold_reason = reason
        self._notify(job)

    # -- scheduling -------------------------------------------------------------------

    def _deps_satisfied(self, job: Job) -> bool:
        return all(self.jobs[d].state == "succeeded"
                   for d in job.depends_on if d in self.jobs)

    def _deps_doomed(self, job: Job) -> bool:
        return any(self.jobs[d].state in ("failed", "cancelled")
                   for d in job.depends_on if d in self.jobs)

    def tick(self) -> None:
        for node_id in sorted(self.queues):
            queue = self.queues[node_id]
            if queue.paused or node_id in self.resyncing:
                continue
            dispatched = False
            for job_id in list(queue.job_ids):
                job = self.jobs[job_id]
                if job.state in TERMINAL_JOB_STATES:
                    queue.job_ids.remove(job_id)
                    continue
                if job.state != "pending":
                    continue
                if self._deps_doomed(job):
                    self._set_state(job, "cancelled", "dependency_failed")
                    continue
                if not self._deps_satisfied(job):
                    continue
                # every eligible job gets a fresh validation verdict; the
                # first clear one dispatches (at most one per device per tick)
                decision, reason = self.plan_dispatch(job)
                if decision == "go" and not dispatched:
                    self._dispatch(job, queue)
                    dispatched = True
                elif decision != "go":
                    job.hold_reason = reason

    # -- pre-dispatch validation ----------------------------------------------------------

    def plan_dispatch(self, job: Job) -> tuple[str, str | None]:
        """Twin look-ahead; returns ("go", None) or ("hold", machine_reason)."""
        if job.target != self.host.node_id:
            if self.host.liveness(job.target) != "alive":
                return "hold", "node_lost"
            if job.target in self.inflight:
                return "hold", "occupied"
        if job.crutd is not None:
            twin = self.store.clone()
            twin_engine = CrutdEngine(twin, graph=self.engine.graph)
            request = CrutdRequest.from_dict(job.crutd)
            request.requires_actuation = False  # twin has no device to confirm
            try:
                txn = twin_engine.begin(request)
                twin_engine.commit(txn)
            except LabError as exc:
                return "hold", exc.details.get("reason", exc.code)
        if job.motion is not None:
            verdict = self._check_motion(job.motion)
            if verdict is not None:
                return "hold", verdict
        return "go", None

    def _check_motion(self, motion: dict[str, Any]) -> str | None:
        subject = motion["subject"]
        if subject not in self.store:
            return "unknown_subject"
        rec = self.store.get(subject)
        if rec.pose is None or not rec.pose.known or rec.dims is None:
            return None  # nothing geometric to check
        target_pose = Pose.from_dict(motion["target_pose"])
        moving = set(self.store.query_subtree(subject))
        exempt = set(moving)
        for anchor in (subject, motion.get("src"), motion.get("dst")):
            if anchor and anchor in self.store:
                exempt.add(anchor)
                exempt.update(self.store.ancestors(anchor))
        obstacles = []
        for uid in self.store.query_subtree(self.store.root_uuid):
            if uid in exempt:
                continue
            other = self.store.get(uid)
            if other.pose is not None and other.pose.known and other.dims:
                obstacles.append((_aabb(other.pose.position, other.dims), uid))
        hit = sweep_collides(rec.pose.position, target_pose.position,
                             rec.dims, obstacles)
        return f"collision:{hit}" if hit else None

    # -- dispatch and completion --------------------------------------------------------------

    def _dispatch(self, job: Job, queue: NodeQueue) -> None:
        txn: Transaction | None = None
        if job.crutd is not None:
            request = CrutdRequest.from_dict(job.crutd)
            if job.kind == "action":
                request.requires_actuation = True
            try:
                txn = self.engine.begin(request)
            except LabError as exc:
                job.hold_reason = exc.details.get("reason", exc.code)
                return
            self._txns[job.job_id] = txn

        if job.kind == "digital":
            assert txn is not None, "digital jobs exist to run a transaction"
            try:
                event = self.engine.commit(txn)
                job.crutd_refs.append(event.seq)
                self._set_state(job, "succeeded")
            except LabError as exc:
                self._set_state(job, "failed", exc.code)
            finally:
                self._txns.pop(job.job_id, None)
            queue.dispatched_history.append(job.job_id)
            self.network.schedule(0.0, self.tick)
            return

        if job.kind == "service":
            self._set_state(job, "dispatched")
            queue.dispatched_history.append(job.job_id)
            call = self.host.bus.call_service(
                job.target, job.capability, job.params,
                timeout=self.policy.service_timeout)
            call.on_done = lambda c: self._service_done(job, c)
            return

        # action job
        self._set_state(job, "dispatched")
        queue.dispatched_history.append(job.job_id)
        self.inflight[job.target] = job.job_id
        handle = self.host.bus.send_goal(
            job.target, job.capability, job.params,
            on_feedback=lambda fb: self._goal_feedback(job, fb),
            on_terminal=lambda h: self._goal_terminal(job, h))
        job.extra["goal_id"] = handle.goal_id
        self._handles[job.job_id] = handle

    def _service_done(self, job: Job, call) -> None:
        if call.error is None:
            self._set_state(job, "succeeded")
        else:
            self._set_state(job, "failed", call.error.code)
        self.network.schedule(0.0, self.tick)

    def _goal_feedback(self, job: Job, feedback: dict[str, Any]) -> None:
        if job.state == "dispatched":
            self._set_state(job, "running")

    def _goal_terminal(self, job: Job, handle) -> None:
        if self._handles.get(job.job_id) is not handle:
            return  # stale goal from before a link-loss requeue
        if self.inflight.get(job.target) == job.job_id:
            del self.inflight[job.target]
        self._handles.pop(job.job_id, None)
        txn = self._txns.pop(job.job_id, None)
        if handle.state == "succeeded":
            if txn is not None:
                confirmation = {"device": job.target, "ok": True,
                                "goal_id": handle.goal_id,
                                "result": handle.result.get("result", {})}
                try:
                    event = self.engine.commit(txn, [confirmation])
                    job.crutd_refs.append(event.seq)
                except LabError as exc:
                    self._set_state(job, "failed", exc.code)
                    self.network.schedule(0.0, self.tick)
                    return
            self._set_state(job, "succeeded")
        else:
            if txn is not None:
                self.engine.rollback(txn, handle.error or LabError(handle.state))
            state = "cancelled" if handle.state == "cancelled" else "failed"
            self._set_state(job, state,
                            handle.error.code if handle.error else handle.state)
        self.network.schedule(0.0, self.tick)

    # -- fault isolation -----------------------------------------------------------------------

    def on_liveness_change(self, node_id: str, status: str) -> None:
        self.liveness_log.append((self.network.now, node_id, status))
        queue = self.queues.get(node_id)
        if status == "lost":
            if queue is not None:
                queue.paused = True
                self.pause_log.append((self.network.now, node_id, True))
                for job_id in queue.job_ids:
                    job = self.jobs[job_id]
                    if job.state == "pending":
                        self._set_state(job, "blocked", "node_lost")
            running_id = self.inflight.get(node_id)
            if running_id is not None:
                handle = self._handles.get(running_id)
                if handle is not None and handle.state == "pending":
                    # the goal frame died in the partition window and was
                    # never accepted: undo the transaction and requeue.
                    # the job returns to pending; its paused queue holds it.
                    txn = self._txns.pop(running_id, None)
                    if txn is not None:
                        self.engine.rollback(txn, LabError("goal undelivered"))
                    del self.inflight[node_id]
                    self._handles.pop(running_id, None)
                    self._set_state(self.jobs[running_id], "blocked",
                                    "goal_undelivered")
                else:
                    self.network.schedule(
                        self.policy.action_timeout,
                        lambda: self._link_loss_timeout(node_id, running_id))
            self._block_dependents()
        elif status == "alive":
            self.resyncing.add(node_id)
            self.resync(node_id, self._resync_finished)

    def _link_loss_timeout(self, node_id: str, job_id: str) -> None:
        job = self.jobs[job_id]
        if self.host.liveness(node_id) == "alive":
            return  # reconnected in time; the goal may still complete
        if job.state in TERMINAL_JOB_STATES:
            return
        txn = self._txns.pop(job_id, None)
        if txn is not None:
            self.engine.rollback(txn, LabError("link lost during execution"))
        if self.inflight.get(node_id) == job_id:
            del self.inflight[node_id]
        self._handles.pop(job_id, None)
        self._set_state(job, "failed", "link_lost")
        self._block_dependents()

    def _block_dependents(self) -> None:
        # transitive closure: pending jobs whose deps are blocked or doomed
        changed = True
        while changed:
            changed = False
            for job in self.jobs.values():
                if job.state != "pending":
                    continue
                for dep in job.depends_on:
                    dep_job = self.jobs.get(dep)
                    if dep_job is not None and dep_job.state == "blocked":
                        self._set_state(job, "blocked", "dependency_blocked")
                        changed = True
                        break

    def _unblock(self) -> None:
        changed = True
        while changed:
            changed = False
            for job in self.jobs.values():
                if job.state != "blocked":
                    continue
                queue = self.queues.get(job.target)
                if queue is not None and queue.paused:
                    continue
                deps_ok = all(
                    self.jobs[d].state not in ("blocked", "failed", "cancelled")
                    for d in job.depends_on if d in self.jobs)
                if deps_ok:
                    self._set_state(job, "pending")
                    changed = True

    def _resync_finished(self, report: ResyncReport) -> None:
        self.resync_reports.append(report)
        node_id = report.node_id
        self.resyncing.discard(node_id)

        def unpause() -> None:
            queue = self.queues.get(node_id)
            if queue is not None:
                queue.paused = False
                self.pause_log.append((self.network.now, node_id, False))
            self._unblock()
            self.network.schedule(0.0, self.tick)

        job_id = self.inflight.get(node_id)
        handle = self._handles.get(job_id) if job_id else None
        if job_id is None or handle is None or handle.terminal:
            unpause()
            return
        # the goal outlived the partition: recover its outcome from the device
        call = self.host.bus.call_service(node_id, "goal.status",
                                          {"goal_id": handle.goal_id},
                                          timeout=self.policy.service_timeout)

        def resolve(c) -> None:
            if c.error is None and c.value.get("known"):
                if c.value.get("terminal"):
                    handle._finish(c.value["state"], c.value.get("payload", {}))
                # else: still executing; its result frame will arrive normally
            elif c.error is None:
                # the device never saw the goal: undo and requeue
                job = self.jobs[job_id]
                txn = self._txns.pop(job_id, None)
                if txn is not None:
                    self.engine.rollback(txn, LabError("goal lost in partition"))
                if self.inflight.get(node_id) == job_id:
                    del self.inflight[node_id]
                self._handles.pop(job_id, None)
                self._set_state(job, "pending", "requeued_after_partition")
            unpause()

        call.on_done = resolve

    # -- resync ------------------------------------------------------------------------------------

    def resync(self, node_id: str,
               on_complete: Callable[[ResyncReport], None] | None = None) -> None:
        """Pull the node's replica, merge field-by-field, push the result
        back, and verify both sides hash identically."""
        report = ResyncReport(node_id=node_id, in_sync=False)

        def finish() -> None:
            if on_complete is not None:
                on_complete(report)

        entry = self.host.registry.get(node_id)
        if entry is None:
            finish()
            return
        call = self.host.bus.call_service(node_id, "tree.snapshot", {},
                                          timeout=self.policy.service_timeout)

        def merge(c) -> None:
            if c.error is not None:
                report.conflicts.append({"kind": "unreachable",
                                         "error": c.error.to_dict()})
                finish()
                return
            node_records: dict[str, Any] = c.value.get("records", {})
            try:
                self._merge_node_records(node_id, node_records, report)
            except ResyncDiverged as exc:
                report.conflicts.append(exc.to_dict())
                self._queue_conflict_approval(node_id, exc)
                finish()
                return
            # push the merged truth back and verify
            self.host._push_subtrees(entry)
            verify = self.host.bus.call_service(
                node_id, "tree.snapshot", {}, timeout=self.policy.service_timeout)

            def check(v) -> None:
                if v.error is None:
                    report.node_hash = v.value.get("hash", "")
                    report.host_hash = self.host.subtree_hash(node_id)
                    report.in_sync = report.node_hash == report.host_hash
                finish()

            verify.on_done = check

        call.on_done = merge

    def _merge_node_records(self, node_id: str, node_records: dict[str, Any],
                            report: ResyncReport) -> None:
        entry = self.host.registry[node_id]
        host_uuids = self.host._subtree_uuids(entry)
        for uid, node_rec in sorted(node_records.items()):
            if uid not in self.store:
                parent = node_rec.get("parent")
                parent_missing = parent not in self.store
                parent_archived = (not parent_missing
                                   and self.store.in_trash(parent))
                if parent_missing or parent_archived:
                    raise ResyncDiverged(
                        f"node created {uid} under "
                        f"{'missing' if parent_missing else 'archived'} parent",
                        subject=uid, node=node_id, parent=parent)
                self.engine.execute(CrutdRequest(
                    op="Create", actor=f"resync:{node_id}",
                    params={"spec": {
                        "uuid": uid, "name": node_rec.get("name", ""),
                        "entity_kind": node_rec.get("kind", "Resource"),
                        "config": node_rec.get("config", {}),
                        "data": node_rec.get("data", {}),
                        "extra": node_rec.get("extra", {}),
                    }, "parent": parent}))
                report.adopted.append((uid, "create", ""))
                continue
            host_rec = self.store.get(uid)
            if uid in host_uuids and node_rec.get("parent") != host_rec.parent_uuid:
                raise ResyncDiverged(
                    f"record {uid} has parent {node_rec.get('parent')} on the "
                    f"node but {host_rec.parent_uuid} on the host",
                    subject=uid, node=node_id)
            # data: node wins; extra: union (node value on key conflicts)
            for ns, node_wins in (("data", True), ("extra", True)):
                node_ns = node_rec.get(ns, {})
                host_ns = host_rec.namespace(ns)
                patch = {k: v for k, v in sorted(node_ns.items())
                         if k not in host_ns or (node_wins and host_ns[k] != v)}
                if patch:
                    self.engine.execute(CrutdRequest(
                        op="Update", subject=uid, actor=f"resync:{node_id}",
                        params={"namespace": ns, "patch": patch}))
                    for k in patch:
                        report.adopted.append((uid, ns, k))
            # config: host wins silently (the push below overwrites the node)

    def _queue_conflict_approval(self, node_id: str, exc: ResyncDiverged) -> None:
        group_id = self.submit({
            "submitted_by": "resync",
            "jobs": [{"target": self.host.node_id, "kind": "digital",
                      "capability": "resolve_conflict",
                      "crutd": CrutdRequest(
                          op="Read", subject=self.store.root_uuid,
                          params={}).to_dict(),
                      "extra": {"conflict": exc.to_dict()}}]})
        job = self.jobs[self.groups[group_id].job_ids[0]]
        self._set_state(job, "awaiting_approval", "resync_conflict")

    # -- approvals -----------------------------------------------------------------------------------

    def approve(self, job_id: str, decision: str, approver: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None or job.state != "awaiting_approval":
            raise NotAwaitingApproval(f"job {job_id} is not awaiting approval",
                                      subject=job_id)
        if approver not in self.policy.operators:
            raise PolicyViolation(f"{approver!r} may not approve jobs",
                                  subject=job_id, approver=approver)
        job.extra["decision"] = decision
        job.extra["approver"] = approver
        if decision == "approve":
            self._set_state(job, "pending")
        else:
            self._set_state(job, "cancelled", "rejected")
            self._cancel_dependents(job_id)
        self.network.schedule(0.0, self.tick)
        return job

    def _cancel_dependents(self, job_id: str) -> None:
        for other in self.jobs.values():
            if job_id in other.depends_on and \
                    other.state not in TERMINAL_JOB_STATES:
                self._set_state(other, "cancelled", "dependency_rejected")
                self._cancel_dependents(other.job_id)

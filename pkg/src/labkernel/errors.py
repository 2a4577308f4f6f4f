"""Structured errors shared across the kernel.

Every error carries a stable machine-readable ``code`` plus a free-form
``details`` map so callers (bus peers, the gateway, the CLI) can relay
failures without parsing prose. ``to_dict`` is the wire form.
"""

from __future__ import annotations

from typing import Any


class LabError(Exception):
    """Base for all kernel errors."""

    code = "lab_error"

    def __init__(self, message: str = "", *, subject: str | None = None,
                 phase: str | None = None, **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.subject = subject
        self.phase = phase
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.subject is not None:
            out["subject"] = self.subject
        if self.phase is not None:
            out["phase"] = self.phase
        if self.details:
            out["details"] = dict(self.details)
        return out

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"{type(self).__name__}({self.message!r})"


def error_from_dict(d: dict[str, Any]) -> LabError:
    """Rebuild a LabError (as the generic base) from its wire form."""
    err = LabError(d.get("message", ""), subject=d.get("subject"),
                   phase=d.get("phase"), **d.get("details", {}))
    err.code = d.get("code", "lab_error")
    return err


# --- resource store ---------------------------------------------------------

class UnknownUuid(LabError):
    code = "unknown_uuid"

class UnknownParent(LabError):
    code = "unknown_parent"

class InvalidKind(LabError):
    code = "invalid_kind"

class DuplicateUuid(LabError):
    code = "duplicate_uuid"

class ActionCannotContain(LabError):
    code = "action_cannot_contain"

class NamespaceCollision(LabError):
    code = "namespace_collision"

class CannotArchiveRoot(LabError):
    code = "cannot_archive_root"

class ValueGrammarError(LabError):
    code = "value_grammar_error"


# --- topology ---------------------------------------------------------------

class DanglingEndpoint(LabError):
    code = "dangling_endpoint"

class UnknownEdge(LabError):
    code = "unknown_edge"

class DuplicateEdgeId(LabError):
    code = "duplicate_edge_id"

class EmptyCandidateSet(LabError):
    code = "empty_candidate_set"


# --- crutd engine -----------------------------------------------------------

class PreconditionFailed(LabError):
    code = "precondition_failed"

class PostconditionFailed(LabError):
    code = "postcondition_failed"

class LockConflict(LabError):
    code = "lock_conflict"

class NoFeasiblePath(LabError):
    code = "no_feasible_path"

class StaleTransaction(LabError):
    code = "stale_transaction"

class SequenceGap(LabError):
    code = "sequence_gap"

class HashMismatch(LabError):
    code = "hash_mismatch"


# --- driver manifests -------------------------------------------------------

class ManifestSyntaxError(LabError):
    code = "manifest_syntax_error"

    def __init__(self, message: str, line: int, col: int, expected: list[str] | None = None):
        super().__init__(message, line=line, col=col, expected=expected or [])
        self.line = line
        self.col = col
        self.expected = expected or []

class DuplicateCapability(ManifestSyntaxError):
    code = "duplicate_capability"

class UnknownUnit(ManifestSyntaxError):
    code = "unknown_unit"

class AmbiguousChannel(ManifestSyntaxError):
    code = "ambiguous_channel"

class NonConformant(LabError):
    code = "non_conformant"


# --- bus --------------------------------------------------------------------

class FrameTooLarge(LabError):
    code = "frame_too_large"

class MalformedFrame(LabError):
    code = "malformed_frame"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message, offset=offset)
        self.offset = offset

class VersionMismatch(LabError):
    code = "version_mismatch"

class RejectedByPolicy(LabError):
    code = "rejected_by_policy"

class HandshakeTimeout(LabError):
    code = "handshake_timeout"

class Timeout(LabError):
    code = "timeout"

class TargetUnknown(LabError):
    code = "target_unknown"

class RemoteError(LabError):
    code = "remote_error"

class UnknownCapability(LabError):
    code = "unknown_capability"

class GoalRejected(LabError):
    code = "goal_rejected"


# --- orchestrator -----------------------------------------------------------

class CyclicDependencies(LabError):
    code = "cyclic_dependencies"

class UnknownTarget(LabError):
    code = "unknown_target"

class NotAwaitingApproval(LabError):
    code = "not_awaiting_approval"

class PolicyViolation(LabError):
    code = "policy_violation"

class ResyncDiverged(LabError):
    code = "resync_diverged"


# --- compiler ---------------------------------------------------------------

class SchemaError(LabError):
    code = "schema_error"

class UnknownVerb(LabError):
    code = "unknown_verb"

class UnresolvedResource(LabError):
    code = "unresolved_resource"

class MissingCapability(LabError):
    code = "missing_capability"


# --- simlab / gateway -------------------------------------------------------

class ScenarioLoadError(LabError):
    code = "scenario_load_error"

class BindError(LabError):
    code = "bind_error"

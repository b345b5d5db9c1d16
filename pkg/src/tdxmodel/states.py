"""TD lifecycle and operation state machines plus the permission matrices.

The host-interface matrix is loaded from a transcribed fixture rather than
hard-coded, so conformance testing reduces to a diff against the same file.
START_IMPORT exists only as the post-fix remediation state: a TD can reach it
only when the engine runs with the fix enabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Optional

from .status import TDX_OP_STATE_INCORRECT, StatusError


class LifecycleState(Enum):
    TD_HKID_ASSIGNED = "TD_HKID_ASSIGNED"
    TD_KEYS_CONFIGURED = "TD_KEYS_CONFIGURED"
    TD_BLOCKED = "TD_BLOCKED"
    TD_TEARDOWN = "TD_TEARDOWN"


_LIFECYCLE_ORDER = [
    LifecycleState.TD_HKID_ASSIGNED,
    LifecycleState.TD_KEYS_CONFIGURED,
    LifecycleState.TD_BLOCKED,
    LifecycleState.TD_TEARDOWN,
]


def lifecycle_successor(state: LifecycleState) -> Optional[LifecycleState]:
    index = _LIFECYCLE_ORDER.index(state)
    if index + 1 < len(_LIFECYCLE_ORDER):
        return _LIFECYCLE_ORDER[index + 1]
    return None


class OpState(Enum):
    UNINITIALIZED = "UNINITIALIZED"
    INITIALIZED = "INITIALIZED"
    RUNNABLE = "RUNNABLE"
    LIVE_EXPORT = "LIVE_EXPORT"
    PAUSED_EXPORT = "PAUSED_EXPORT"
    POST_EXPORT = "POST_EXPORT"
    MEMORY_IMPORT = "MEMORY_IMPORT"
    STATE_IMPORT = "STATE_IMPORT"
    POST_IMPORT = "POST_IMPORT"
    LIVE_IMPORT = "LIVE_IMPORT"
    FAILED_IMPORT = "FAILED_IMPORT"
    START_IMPORT = "START_IMPORT"


# The states the transcribed host table enumerates (START_IMPORT excluded).
APPENDIX_STATES = [s for s in OpState if s is not OpState.START_IMPORT]


class Leaf(Enum):
    """API leaves the model dispatches, host (TDH) and guest (TDG) interfaces."""

    TDH_VP_ENTER = 0
    TDH_MNG_ADDCX = 1
    TDH_MEM_PAGE_ADD = 2
    TDH_MEM_SEPT_ADD = 3
    TDH_VP_ADDCX = 4
    TDH_MEM_PAGE_RELOCATE = 5
    TDH_MEM_PAGE_AUG = 6
    TDH_MEM_RANGE_BLOCK = 7
    TDH_MNG_KEY_CONFIG = 8
    TDH_MNG_CREATE = 9
    TDH_VP_CREATE = 10
    TDH_MNG_RD = 11
    TDH_MEM_RD = 12
    TDH_MNG_WR = 13
    TDH_MEM_WR = 14
    TDH_MEM_PAGE_DEMOTE = 15
    TDH_MR_EXTEND = 16
    TDH_MR_FINALIZE = 17
    TDH_VP_FLUSH = 18
    TDH_MNG_INIT = 21
    TDH_VP_INIT = 22
    TDH_MEM_PAGE_PROMOTE = 23
    TDH_MEM_SEPT_RD = 25
    TDH_VP_RD = 26
    TDH_MEM_PAGE_REMOVE = 29
    TDH_MEM_SEPT_REMOVE = 30
    TDH_MEM_TRACK = 38
    TDH_MEM_RANGE_UNBLOCK = 39
    TDH_VP_WR = 43
    TDH_SYS_CONFIG = 45
    TDH_SERVTD_BIND = 48
    TDH_SERVTD_PREBIND = 49
    TDH_EXPORT_ABORT = 64
    TDH_EXPORT_BLOCKW = 65
    TDH_EXPORT_RESTORE = 66
    TDH_EXPORT_MEM = 68
    TDH_EXPORT_PAUSE = 70
    TDH_EXPORT_TRACK = 71
    TDH_EXPORT_STATE_IMMUTABLE = 72
    TDH_EXPORT_STATE_TD = 73
    TDH_EXPORT_STATE_VP = 74
    TDH_EXPORT_UNBLOCKW = 75
    TDH_IMPORT_ABORT = 80
    TDH_IMPORT_END = 81
    TDH_IMPORT_COMMIT = 82
    TDH_IMPORT_MEM = 83
    TDH_IMPORT_TRACK = 84
    TDH_IMPORT_STATE_IMMUTABLE = 85
    TDH_IMPORT_STATE_TD = 86
    TDH_IMPORT_STATE_VP = 87
    TDH_MIG_STREAM_CREATE = 96
    TDG_SERVTD_RD = 118
    TDG_SERVTD_WR = 120


@dataclass(frozen=True)
class MatrixRow:
    next_on_success: Optional[OpState]
    next_on_failure: Optional[OpState]
    provenance: str


class PermissionMatrix:
    """Boolean (op_state x leaf) tables for the host and guest interfaces."""

    def __init__(self, rows: dict[tuple[str, OpState, Leaf], MatrixRow]):
        self._rows = rows

    @classmethod
    def load(cls, text: Optional[str] = None) -> "PermissionMatrix":
        if text is None:
            text = resources.files("tdxmodel.data").joinpath("op_state_matrix.txt").read_text()
        rows: dict[tuple[str, OpState, Leaf], MatrixRow] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            iface, state_name, leaf_name, on_success, on_failure, provenance = line.split()
            key = (iface, OpState(state_name), Leaf[leaf_name])
            if key in rows:
                raise ValueError(f"duplicate matrix row: {line!r}")
            rows[key] = MatrixRow(
                next_on_success=None if on_success == "-" else OpState(on_success),
                next_on_failure=None if on_failure == "-" else OpState(on_failure),
                provenance=provenance,
            )
        return cls(rows)

    def is_allowed(self, state: OpState, leaf: Leaf, interface: str = "host") -> bool:
        if not isinstance(leaf, Leaf):
            raise ValueError(f"unknown leaf: {leaf!r}")
        if interface not in ("host", "guest"):
            raise ValueError(f"unknown interface: {interface!r}")
        return (interface, state, leaf) in self._rows

    def row(self, state: OpState, leaf: Leaf, interface: str = "host") -> Optional[MatrixRow]:
        return self._rows.get((interface, state, leaf))

    def allowed_leaves(self, state: OpState, interface: str = "host") -> list[Leaf]:
        return [
            leaf
            for (iface, row_state, leaf) in self._rows
            if iface == interface and row_state == state
        ]

    def items(self):
        return self._rows.items()


_IMPORT_TOUCH_LEAF = Leaf.TDH_IMPORT_STATE_IMMUTABLE


def transition(
    matrix: PermissionMatrix,
    state: OpState,
    leaf: Leaf,
    outcome: str,
    mode: str = "vulnerable",
    interface: str = "host",
) -> OpState:
    """Pure next-state function over the fixture's transition columns.

    outcome is one of success, failure, interrupted.  Interruption never moves
    the op_state; a fatal import failure lands in FAILED_IMPORT via the
    failure column.  With the fix enabled, the first touch of the immutable
    import moves an UNINITIALIZED TD to START_IMPORT so the non-import
    initialization path can no longer be interleaved.
    """
    row = matrix.row(state, leaf, interface)
    if row is None:
        raise StatusError(TDX_OP_STATE_INCORRECT)
    base = state
    if mode == "fixed" and state is OpState.UNINITIALIZED and leaf is _IMPORT_TOUCH_LEAF:
        base = OpState.START_IMPORT
    if outcome == "interrupted":
        return base
    if outcome == "success":
        return row.next_on_success or base
    if outcome == "failure":
        return row.next_on_failure or base
    raise ValueError(f"unknown outcome: {outcome!r}")


@dataclass
class TraceStep:
    leaf: Leaf
    before: OpState
    after: OpState
    status: int


def validate_trace(matrix: PermissionMatrix, steps: list[TraceStep], mode: str) -> list[str]:
    """Check that every observed op_state edge is a path in the fixture graph.

    Returns a list of violation descriptions; empty means the trace is valid.
    """
    problems = []
    for step in steps:
        row = matrix.row(step.before, step.leaf)
        if row is None:
            # A denied attempt is not an edge; anything else here is a violation.
            if step.after is step.before and step.status == TDX_OP_STATE_INCORRECT:
                continue
            problems.append(f"{step.leaf.name} not allowed in {step.before.name}")
            continue
        legal = {step.before, row.next_on_success or step.before, row.next_on_failure or step.before}
        if mode == "fixed" and step.before is OpState.UNINITIALIZED and step.leaf is _IMPORT_TOUCH_LEAF:
            legal.add(OpState.START_IMPORT)
        if step.after not in legal:
            problems.append(
                f"{step.leaf.name}: {step.before.name} -> {step.after.name} not in fixture"
            )
    return problems

"""Permission-matrix conformance: the enumeration is diffed against the fixture."""

from importlib import resources

import pytest

from tdxmodel.states import (
    APPENDIX_STATES,
    Leaf,
    LifecycleState,
    OpState,
    TraceStep,
    lifecycle_successor,
    transition,
    validate_trace,
)
from tdxmodel.status import TDX_OP_STATE_INCORRECT, TDX_SUCCESS, StatusError


def _fixture_rows():
    """Independent parse of the fixture for the conformance diff."""
    text = resources.files("tdxmodel.data").joinpath("op_state_matrix.txt").read_text()
    rows = set()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        iface, state, leaf, _, _, _ = line.split()
        rows.add((iface, state, leaf))
    return rows


def test_exhaustive_enumeration_matches_fixture(matrix):
    expected = _fixture_rows()
    observed = set()
    for iface in ("host", "guest"):
        for state in OpState:
            for leaf in Leaf:
                if matrix.is_allowed(state, leaf, iface):
                    observed.add((iface, state.value, leaf.name))
    assert observed == expected


def test_appendix_states_count():
    assert len(APPENDIX_STATES) == 11
    assert OpState.START_IMPORT not in APPENDIX_STATES


@pytest.mark.parametrize(
    "state,leaf,allowed",
    [
        (OpState.UNINITIALIZED, Leaf.TDH_MNG_INIT, True),
        (OpState.RUNNABLE, Leaf.TDH_IMPORT_STATE_TD, False),
        (OpState.RUNNABLE, Leaf.TDH_EXPORT_STATE_IMMUTABLE, True),
        (OpState.RUNNABLE, Leaf.TDH_EXPORT_STATE_TD, False),
        (OpState.PAUSED_EXPORT, Leaf.TDH_EXPORT_STATE_TD, True),
        (OpState.MEMORY_IMPORT, Leaf.TDH_IMPORT_STATE_TD, True),
        (OpState.STATE_IMPORT, Leaf.TDH_IMPORT_STATE_VP, True),
        (OpState.START_IMPORT, Leaf.TDH_MNG_INIT, False),
        (OpState.START_IMPORT, Leaf.TDH_IMPORT_STATE_IMMUTABLE, True),
        (OpState.INITIALIZED, Leaf.TDH_MR_FINALIZE, True),
        (OpState.FAILED_IMPORT, Leaf.TDH_IMPORT_MEM, False),
    ],
)
def test_host_spot_checks(matrix, state, leaf, allowed):
    assert matrix.is_allowed(state, leaf, "host") is allowed


def test_guest_interface_rule(matrix):
    for state in OpState:
        assert matrix.is_allowed(state, Leaf.TDG_SERVTD_RD, "guest")
        expected_wr = state not in (OpState.PAUSED_EXPORT, OpState.POST_EXPORT)
        assert matrix.is_allowed(state, Leaf.TDG_SERVTD_WR, "guest") is expected_wr


def test_unknown_leaf_raises(matrix):
    with pytest.raises(ValueError):
        matrix.is_allowed(OpState.RUNNABLE, "TDH_BOGUS", "host")
    with pytest.raises(ValueError):
        matrix.is_allowed(OpState.RUNNABLE, Leaf.TDH_MNG_RD, "midway")


# --- transitions -------------------------------------------------------------------

def test_interrupted_import_stays_put_or_enters_start_import(matrix):
    result = transition(
        matrix, OpState.UNINITIALIZED, Leaf.TDH_IMPORT_STATE_IMMUTABLE, "interrupted",
        mode="vulnerable",
    )
    assert result is OpState.UNINITIALIZED
    result = transition(
        matrix, OpState.UNINITIALIZED, Leaf.TDH_IMPORT_STATE_IMMUTABLE, "interrupted",
        mode="fixed",
    )
    assert result is OpState.START_IMPORT


@pytest.mark.parametrize(
    "state,leaf,outcome,expected",
    [
        (OpState.MEMORY_IMPORT, Leaf.TDH_IMPORT_STATE_TD, "success", OpState.STATE_IMPORT),
        (OpState.MEMORY_IMPORT, Leaf.TDH_IMPORT_STATE_TD, "failure", OpState.FAILED_IMPORT),
        (OpState.LIVE_EXPORT, Leaf.TDH_EXPORT_ABORT, "success", OpState.RUNNABLE),
        (OpState.LIVE_EXPORT, Leaf.TDH_EXPORT_PAUSE, "success", OpState.PAUSED_EXPORT),
        (OpState.LIVE_EXPORT, Leaf.TDH_EXPORT_TRACK, "success", OpState.POST_EXPORT),
        (OpState.UNINITIALIZED, Leaf.TDH_MNG_INIT, "success", OpState.INITIALIZED),
        (OpState.UNINITIALIZED, Leaf.TDH_MNG_INIT, "failure", OpState.UNINITIALIZED),
        (OpState.INITIALIZED, Leaf.TDH_MR_FINALIZE, "success", OpState.RUNNABLE),
        (OpState.POST_IMPORT, Leaf.TDH_IMPORT_END, "success", OpState.RUNNABLE),
        (OpState.POST_IMPORT, Leaf.TDH_IMPORT_COMMIT, "success", OpState.LIVE_IMPORT),
        (OpState.LIVE_IMPORT, Leaf.TDH_IMPORT_END, "success", OpState.RUNNABLE),
        (OpState.MEMORY_IMPORT, Leaf.TDH_IMPORT_ABORT, "success", OpState.FAILED_IMPORT),
    ],
)
def test_transitions(matrix, state, leaf, outcome, expected):
    assert transition(matrix, state, leaf, outcome) is expected


def test_disallowed_leaf_is_op_state_incorrect(matrix):
    with pytest.raises(StatusError) as err:
        transition(matrix, OpState.RUNNABLE, Leaf.TDH_IMPORT_STATE_TD, "success")
    assert err.value.status == TDX_OP_STATE_INCORRECT


def _reachable_states(matrix, mode):
    seen = {OpState.UNINITIALIZED}
    frontier = [OpState.UNINITIALIZED]
    while frontier:
        state = frontier.pop()
        for leaf in Leaf:
            if not matrix.is_allowed(state, leaf):
                continue
            for outcome in ("success", "failure", "interrupted"):
                after = transition(matrix, state, leaf, outcome, mode)
                if after not in seen:
                    seen.add(after)
                    frontier.append(after)
    return seen


def test_start_import_only_reachable_in_fixed_mode(matrix):
    assert OpState.START_IMPORT not in _reachable_states(matrix, "vulnerable")
    assert OpState.START_IMPORT in _reachable_states(matrix, "fixed")


def test_lifecycle_order():
    assert lifecycle_successor(LifecycleState.TD_HKID_ASSIGNED) is LifecycleState.TD_KEYS_CONFIGURED
    assert lifecycle_successor(LifecycleState.TD_KEYS_CONFIGURED) is LifecycleState.TD_BLOCKED
    assert lifecycle_successor(LifecycleState.TD_TEARDOWN) is None


def test_trace_validator_accepts_legal_paths(matrix):
    steps = [
        TraceStep(Leaf.TDH_MNG_INIT, OpState.UNINITIALIZED, OpState.INITIALIZED, TDX_SUCCESS),
        TraceStep(Leaf.TDH_MR_FINALIZE, OpState.INITIALIZED, OpState.RUNNABLE, TDX_SUCCESS),
    ]
    assert validate_trace(matrix, steps, "vulnerable") == []


def test_trace_validator_flags_illegal_edges(matrix):
    steps = [
        TraceStep(Leaf.TDH_MNG_INIT, OpState.UNINITIALIZED, OpState.RUNNABLE, TDX_SUCCESS),
    ]
    problems = validate_trace(matrix, steps, "vulnerable")
    assert problems and "not in fixture" in problems[0]
    steps = [
        TraceStep(Leaf.TDH_MNG_INIT, OpState.RUNNABLE, OpState.RUNNABLE, TDX_SUCCESS),
    ]
    assert validate_trace(matrix, steps, "vulnerable")


def test_mng_init_allowed_only_before_any_import_touch(matrix):
    # The initialization leaf exists in exactly one row, and no edge in the
    # fixture graph leads back to that state once an import has started.
    init_states = [
        state for state in OpState if matrix.is_allowed(state, Leaf.TDH_MNG_INIT)
    ]
    assert init_states == [OpState.UNINITIALIZED]
    for start in (OpState.START_IMPORT, OpState.MEMORY_IMPORT, OpState.FAILED_IMPORT):
        seen = {start}
        frontier = [start]
        while frontier:
            state = frontier.pop()
            for leaf in Leaf:
                if not matrix.is_allowed(state, leaf):
                    continue
                for outcome in ("success", "failure"):
                    after = transition(matrix, state, leaf, outcome, "fixed")
                    if after not in seen:
                        seen.add(after)
                        frontier.append(after)
        assert OpState.UNINITIALIZED not in seen

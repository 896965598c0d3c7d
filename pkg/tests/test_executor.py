import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from shielda.agentops import EventKind, EventLog, state_digest
from shielda.entities import EntityKind, EntityRef
from shielda.errors import Exhausted, StateRecoveryError
from shielda.escalation import root_cause_trace, trace_seeds
from shielda.executor import (
    HANDLERS,
    HandlingOutcome,
    LocalResult,
    OutcomeStatus,
    RetryPolicy,
    apply_flow,
    apply_recovery,
    handle,
    retry_with_backoff,
    rollback_scope,
)
from shielda.registry import FlowControlDecision, LocalHandlingMechanism, StateRecoveryAction
from shielda.taxonomy import ArtifactKind, Phase
from tests.helpers import FakeRuntime, make_ctx, recovery_trial
from tests.oracles import WORKFLOW_DIRECTIVE, nominal_backoff

WORKFLOW = ".github/workflows/autopr.yml"
PUSH_MESSAGE = (
    "remote: refusing to allow a GitHub App to create or update workflow "
    f"`{WORKFLOW}` without `workflows` permission"
)


def _always_fail(attempt):
    raise RuntimeError(f"fail {attempt}")


# ---------------------------------------------------------------- backoff


def test_backoff_always_failing_schedule():
    with pytest.raises(Exhausted) as info:
        retry_with_backoff(RetryPolicy(base_delay=100, multiplier=2, max_attempts=4), _always_fail)
    assert info.value.delays == [100, 200, 400, 800]
    assert info.value.max_attempts == 4
    assert isinstance(info.value.last_failure, RuntimeError)


def test_backoff_first_try_success():
    result = retry_with_backoff(RetryPolicy(max_attempts=1), lambda k: "ok")
    assert (result.value, result.attempts, result.delays) == ("ok", 1, [])


def test_backoff_succeeds_on_third_attempt():
    def op(k):
        if k < 3:
            raise RuntimeError
        return k

    result = retry_with_backoff(RetryPolicy(base_delay=50, multiplier=3, max_attempts=3), op)
    assert (result.value, result.attempts, result.delays) == (3, 3, [50, 150])


def test_backoff_does_not_retry_foreign_exceptions():
    calls = []

    def op(k):
        calls.append(k)
        raise KeyError

    with pytest.raises(KeyError):
        retry_with_backoff(RetryPolicy(), op, retry_on=RuntimeError)
    assert calls == [1]


def test_on_delay_sees_every_delay():
    seen = []
    with pytest.raises(Exhausted):
        retry_with_backoff(RetryPolicy(), _always_fail, on_delay=seen.append)
    assert seen == [100, 200, 400]


@pytest.mark.parametrize(
    "kwargs",
    [{"base_delay": -1}, {"multiplier": Fraction(1, 2)}, {"max_attempts": 0}, {"jitter": 1.0}, {"jitter": -0.1}],
)
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        RetryPolicy(**kwargs)


def test_fractional_multiplier_is_exact():
    policy = RetryPolicy(base_delay=10, multiplier=Fraction(3, 2), max_attempts=3)
    assert [policy.delay(k) for k in (1, 2, 3)] == [10, 15, 22.5]


@given(
    base=st.integers(0, 10_000),
    mult=st.fractions(min_value=1, max_value=5, max_denominator=8),
    max_attempts=st.integers(1, 8),
    succeed_at=st.integers(1, 10),
)
def test_backoff_law(base, mult, max_attempts, succeed_at):
    policy = RetryPolicy(base_delay=base, multiplier=mult, max_attempts=max_attempts)
    calls = []

    def op(k):
        calls.append(k)
        if k < succeed_at:
            raise RuntimeError
        return k

    try:
        result = retry_with_backoff(policy, op)
        delays = result.delays
        assert result.attempts == succeed_at <= max_attempts
    except Exhausted as exc:
        delays = exc.delays
        assert succeed_at > max_attempts
    assert len(calls) <= max_attempts
    assert [Fraction(d) for d in delays] == [nominal_backoff(base, mult, k) for k in range(1, len(delays) + 1)]


@given(jitter=st.floats(0.01, 0.99), seed=st.integers(0, 1000), attempt=st.integers(1, 6))
def test_jitter_only_shrinks(jitter, seed, attempt):
    policy = RetryPolicy(jitter=jitter)
    d = Fraction(policy.delay(attempt, random.Random(seed)))
    nominal = nominal_backoff(100, 2, attempt)
    assert nominal * (1 - Fraction(jitter)) <= d <= nominal


# ---------------------------------------------------------------- handlers


def test_every_mechanism_has_a_handler():
    assert set(HANDLERS) == set(LocalHandlingMechanism)
    retry_class = {m for m, h in HANDLERS.items() if h.retry_class}
    assert retry_class == {LocalHandlingMechanism.RETRY_WITH_BACKOFF}


def _kinds(log, since=1):
    return [e.kind for e in log.events if e.seq >= since]


def test_retry_succeeds_on_second_attempt():
    runtime = FakeRuntime(redispatch_results=[LocalResult.failure("500"), LocalResult.success("ok", step_completed=True)])
    ctx = make_ctx("P018", runtime=runtime)
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.RECOVERED
    assert outcome.attempts_used == 2
    assert outcome.flow is FlowControlDecision.CONTINUE
    assert outcome.recovery_applied is StateRecoveryAction.NO_OP
    assert ctx.budget == 1
    # one backoff delay of 100 ticks sits between the two attempts
    attempts = ctx.log.query(kind=EventKind.LOCAL_ATTEMPT)
    assert attempts[1].logical_time - attempts[0].logical_time == 101
    flow = ctx.log.query(kind=EventKind.FLOW_APPLIED)[0]
    assert flow.payload["redispatch"] is False


def test_retry_exhaustion_is_failed_local():
    ctx = make_ctx("P018", "external.protocol_mismatch", message=PUSH_MESSAGE)
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.FAILED_LOCAL
    assert outcome.attempts_used == 3
    assert outcome.flow is None
    assert _kinds(ctx.log, 2) == [EventKind.LOCAL_ATTEMPT] * 3
    assert ctx.log.now == 1 + 3 + 100 + 200 + 400


def _autopr_ctx(repair_ok=True):
    log = EventLog()
    workflow = EntityRef(EntityKind.FILE_PATH, WORKFLOW)
    log.append(
        EventKind.PLAN_GENERATED,
        thread_id="t1",
        mission_id="m1",
        phase=Phase.REASONING_PLANNING,
        payload={"plan_id": "p1", "steps": []},
        entities=[workflow],
    )
    runtime = FakeRuntime(protected_paths=(".github/workflows/",), goal="Add a reviewer.", repair_ok=repair_ok)
    ctx = make_ctx("P012", "planning.faulty_task_structuring", message=PUSH_MESSAGE, runtime=runtime, log=log)
    symptom = log.get(ctx.symptom_seq)
    ctx.chain = root_cause_trace(log.events, ctx.symptom_seq, trace_seeds(symptom, ctx.signal))
    return ctx


def test_plan_repair_aborts_thread_and_issues_directive():
    ctx = _autopr_ctx()
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.ABORTED_THREAD
    assert outcome.flow is FlowControlDecision.ABORT
    assert outcome.recovery_applied is StateRecoveryAction.NO_OP
    directive = ctx.runtime.directives[0]
    assert WORKFLOW_DIRECTIVE in directive.text
    assert WORKFLOW in directive.text
    assert directive.text.startswith("Add a reviewer.")
    assert directive.provenance == 1
    kinds = _kinds(ctx.log, ctx.symptom_seq + 1)
    assert kinds == [
        EventKind.DIRECTIVE_ISSUED,
        EventKind.LOCAL_ATTEMPT,
        EventKind.FLOW_APPLIED,
        EventKind.THREAD_ABORTED,
        EventKind.RECOVERY_APPLIED,
    ]
    issued = ctx.log.query(kind=EventKind.DIRECTIVE_ISSUED)[0]
    assert issued.phase is Phase.REASONING_PLANNING


def test_plan_repair_without_compliant_plan_fails_locally():
    ctx = _autopr_ctx(repair_ok=False)
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.FAILED_LOCAL
    assert outcome.attempts_used == 1


def test_plan_repair_without_plan_event_fails():
    outcome = handle(make_ctx("P012", "planning.faulty_task_structuring"))
    assert outcome.status is OutcomeStatus.FAILED_LOCAL


def test_stub_mechanism_yields_to_escalation():
    ctx = make_ctx("P001", "goal.ambiguous")
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.FAILED_LOCAL
    assert outcome.attempts_used == 1
    assert "NotImplemented" in outcome.reason


def test_escalate_to_human_needs_a_classification_first():
    ctx = make_ctx("P040", "Unclassified")
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.FAILED_LOCAL
    assert "NeedsEscalation" in outcome.reason
    assert ctx.runtime.notified == []


def test_escalate_to_human_notifies_when_classified():
    ctx = make_ctx("P040", "tool.invocation")
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.ABORTED_THREAD
    assert ctx.runtime.notified


def test_skip_on_terminal_step_marks_it_skipped():
    ctx = make_ctx("P038", "interface.ui_misclick")
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.RECOVERED
    assert outcome.flow is FlowControlDecision.SKIP
    assert ctx.log.query(kind=EventKind.STEP_SKIPPED)[0].payload["step_id"] == "s1"


def test_skip_with_hard_dependents_is_refused():
    ctx = make_ctx("P038", "interface.ui_misclick", runtime=FakeRuntime(dependents=["s2"]))
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.FAILED_LOCAL
    assert "s2" in outcome.reason
    assert not ctx.log.query(kind=EventKind.FLOW_APPLIED)


def test_continue_without_completion_asks_for_redispatch():
    ctx = make_ctx("P035", "model.token_limit_exceeded")
    outcome = handle(ctx)
    assert outcome.status is OutcomeStatus.RECOVERED
    assert outcome.flow_result.redispatch


def test_abort_flow_directly():
    ctx = make_ctx("P017", "taskflow.error_propagation")
    result = apply_flow(FlowControlDecision.ABORT, ctx)
    assert result.thread_aborted
    assert ctx.log.query(kind=EventKind.THREAD_ABORTED)


@pytest.mark.parametrize("pattern_id, exception_id", [("P018", "tool.invocation"), ("P027", "memory.poisoning"), ("P012", "planning.faulty_task_structuring")])
def test_stage_ordering(pattern_id, exception_id):
    runtime = FakeRuntime(redispatch_results=[LocalResult.success("ok")])
    runtime.checkpoints.checkpoint("t1", ArtifactKind.MEMORY, {})
    ctx = make_ctx(pattern_id, exception_id, runtime=runtime) if pattern_id != "P012" else _autopr_ctx()
    outcome = handle(ctx)
    assert outcome.status is not OutcomeStatus.FAILED_LOCAL
    seqs = {k: [e.seq for e in ctx.log.query(kind=k)] for k in (EventKind.LOCAL_ATTEMPT, EventKind.FLOW_APPLIED, EventKind.RECOVERY_APPLIED)}
    assert max(seqs[EventKind.LOCAL_ATTEMPT]) < min(seqs[EventKind.FLOW_APPLIED]) < min(seqs[EventKind.RECOVERY_APPLIED])


def test_outcome_coupling_invariant():
    with pytest.raises(ValueError):
        HandlingOutcome(OutcomeStatus.RECOVERED, 1, FlowControlDecision.ABORT, StateRecoveryAction.NO_OP, "P001")
    with pytest.raises(ValueError):
        HandlingOutcome(OutcomeStatus.ABORTED_THREAD, 1, FlowControlDecision.CONTINUE, StateRecoveryAction.NO_OP, "P001")
    HandlingOutcome(OutcomeStatus.RECOVERED, 1, FlowControlDecision.SKIP, StateRecoveryAction.NO_OP, "P001")


# ---------------------------------------------------------------- recovery


def test_noop_preserves_digest():
    ctx = make_ctx("P018")
    ctx.runtime.env.memory["a"] = "b"
    result = apply_recovery(StateRecoveryAction.NO_OP, ctx)
    assert result.digest_before == result.digest_after


def test_rollback_after_poisoning_restores_checkpoint():
    runtime = FakeRuntime()
    runtime.env.memory["route"] = "clean"
    ckpt = runtime.checkpoints.checkpoint("t1", ArtifactKind.MEMORY, runtime.env.scope_state(ArtifactKind.MEMORY))
    runtime.env.memory["route"] = "POISONED"
    ctx = make_ctx("P027", "memory.poisoning", runtime=runtime)
    result = apply_recovery(StateRecoveryAction.ROLLBACK, ctx)
    assert runtime.env.memory == {"route": "clean"}
    assert state_digest(runtime.env.memory) == runtime.checkpoints.get(ckpt).state_digest
    assert result.detail["checkpoint_id"] == ckpt


def test_rollback_without_checkpoint_fails():
    with pytest.raises(StateRecoveryError):
        apply_recovery(StateRecoveryAction.ROLLBACK, make_ctx("P027", "memory.poisoning"))


def test_compensate_posted_comment():
    runtime = FakeRuntime()
    before = runtime.env.effective_ledger()
    runtime.env.record({"kind": "comment", "target": "pr-1", "body": "hi", "step_id": "s1", "thread_id": "t1"})
    ctx = make_ctx("P037", "interface.ui_misclick", runtime=runtime)
    result = apply_recovery(StateRecoveryAction.COMPENSATE, ctx)
    assert [i["kind"] for i in result.detail["inverses"]] == ["delete_comment"]
    assert runtime.env.ledger[-1]["kind"] == "delete_comment"
    assert runtime.env.effective_ledger() == before


def test_compensate_unknown_effect_fails():
    runtime = FakeRuntime()
    runtime.env.record({"kind": "launch_rocket", "target": "moon", "step_id": "s1", "thread_id": "t1"})
    with pytest.raises(StateRecoveryError):
        apply_recovery(StateRecoveryAction.COMPENSATE, make_ctx("P037", "interface.ui_misclick", runtime=runtime))


def test_rollback_scope_mapping():
    assert rollback_scope(ArtifactKind.MEMORY) is ArtifactKind.MEMORY
    assert rollback_scope(ArtifactKind.KNOWLEDGE_BASE) is ArtifactKind.MEMORY
    assert rollback_scope(ArtifactKind.TASK_FLOW) is ArtifactKind.TASK_FLOW
    assert rollback_scope(ArtifactKind.TOOL) is ArtifactKind.TASK_FLOW
    assert rollback_scope(None) is ArtifactKind.TASK_FLOW


@given(st.integers(0, 10_000))
def test_recovery_laws_hold(seed):
    assert recovery_trial(seed) == {"noop": True, "rollback": True, "compensate": True}

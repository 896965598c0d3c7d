"""Handling executor: local handling, then flow control, then state recovery.

Each local handling mechanism is bound to a handler callable.  Handlers talk
to the outside world only through a :class:`Runtime`, so the same executor
drives the simulator and unit-test fakes.  Mechanisms without a concrete
handler are registered as stubs that answer ``NotImplemented``, which sends
the exception on to escalation.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Mapping, Protocol, Sequence

from shielda.agentops import CheckpointStore, EventKind, EventLog, state_digest
from shielda.classifier import Classification, RawExceptionSignal
from shielda.entities import extract_entities
from shielda.errors import DependencyViolation, DirectiveError, Exhausted, StateRecoveryError
from shielda.escalation import (
    CausalChain,
    CorrectiveDirective,
    derive_constraints,
    root_cause_entities,
    synthesize_corrective_directive,
)
from shielda.registry import (
    FlowControlDecision,
    HandlerPattern,
    LocalHandlingMechanism,
    StateRecoveryAction,
)
from shielda.taxonomy import ArtifactKind, Phase

M = LocalHandlingMechanism


class LocalStatus(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    NEEDS_ESCALATION = "NeedsEscalation"
    NOT_IMPLEMENTED = "NotImplemented"


@dataclass(frozen=True)
class LocalResult:
    status: LocalStatus
    reason: str = ""
    # the failing step's work is done and must not be re-dispatched
    step_completed: bool = False

    @classmethod
    def success(cls, reason: str = "", step_completed: bool = False) -> "LocalResult":
        return cls(LocalStatus.SUCCESS, reason, step_completed)

    @classmethod
    def failure(cls, reason: str) -> "LocalResult":
        return cls(LocalStatus.FAILURE, reason)

    @classmethod
    def needs_escalation(cls, reason: str) -> "LocalResult":
        return cls(LocalStatus.NEEDS_ESCALATION, reason)

    @classmethod
    def not_implemented(cls, reason: str = "no concrete handler") -> "LocalResult":
        return cls(LocalStatus.NOT_IMPLEMENTED, reason)


@dataclass(frozen=True)
class RetryPolicy:
    base_delay: int = 100
    multiplier: Fraction | int | float = 2
    max_attempts: int = 3
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.base_delay < 0:
            raise ValueError("base_delay must be >= 0")
        if Fraction(self.multiplier) < 1:
            raise ValueError("multiplier must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")

    def nominal_delay(self, attempt: int) -> Fraction:
        """Delay after failed attempt ``attempt`` (1-based), before jitter."""
        return self.base_delay * Fraction(self.multiplier) ** (attempt - 1)

    def delay(self, attempt: int, rng: random.Random | None = None) -> int | Fraction:
        nominal = self.nominal_delay(attempt)
        if self.jitter and rng is not None:
            # shrink by up to `jitter` of the nominal value
            nominal *= 1 - Fraction(self.jitter) * Fraction(rng.random())
        # non-integral delays stay exact rather than rounding through float
        return int(nominal) if nominal.denominator == 1 else nominal


@dataclass
class RetryResult:
    value: Any
    attempts: int
    delays: list


def retry_with_backoff(
    policy: RetryPolicy,
    op: Callable[[int], Any],
    *,
    retry_on: type[BaseException] | tuple[type[BaseException], ...] = Exception,
    rng: random.Random | None = None,
    on_delay: Callable[[int | Fraction], None] | None = None,
) -> RetryResult:
    """Call ``op(attempt)`` until it returns, at most ``policy.max_attempts`` times.

    A delay is recorded after every failed attempt, including the last one.
    Exceptions outside ``retry_on`` propagate immediately.
    """
    delays: list = []
    last: BaseException | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            value = op(attempt)
        except retry_on as exc:
            last = exc
            d = policy.delay(attempt, rng)
            delays.append(d)
            if on_delay is not None:
                on_delay(d)
            continue
        return RetryResult(value, attempt, delays)
    raise Exhausted(policy.max_attempts, last, delays)


class Runtime(Protocol):
    """What handlers and recovery need from the world around the executor."""

    checkpoints: CheckpointStore
    protected_paths: Sequence[str]

    def goal_for(self, mission_id: str) -> str: ...
    def redispatch(self, ctx: "HandlingContext") -> LocalResult: ...
    def switch_tool(self, ctx: "HandlingContext") -> LocalResult: ...
    def reset_memory(self, ctx: "HandlingContext") -> LocalResult: ...
    def repair_plan(self, ctx: "HandlingContext", directive: CorrectiveDirective) -> bool: ...
    def notify_human(self, ctx: "HandlingContext", reason: str) -> None: ...
    def scope_state(self, scope: ArtifactKind) -> Any: ...
    def restore_scope(self, scope: ArtifactKind, state: Any) -> None: ...
    def full_state(self) -> Any: ...
    def step_effects(self, thread_id: str, step_ref: str | None) -> list[dict]: ...
    def compensate(self, effect: dict) -> dict: ...
    def hard_dependents(self, thread_id: str, step_ref: str | None) -> list[str]: ...


@dataclass
class HandlingContext:
    classification: Classification
    signal: RawExceptionSignal
    thread_id: str
    mission_id: str
    step_ref: str | None
    pattern: HandlerPattern
    runtime: Runtime
    log: EventLog
    symptom_seq: int
    budget: int = 1
    chain: CausalChain | None = None
    depth: int = 0
    policy: RetryPolicy = field(default_factory=RetryPolicy)
    rng: random.Random = field(default_factory=lambda: random.Random(0))

    def emit(self, kind: EventKind, payload: Mapping[str, Any], phase: Phase | None = None) -> int:
        return self.log.append(
            kind,
            thread_id=self.thread_id,
            mission_id=self.mission_id,
            phase=phase or self.classification.phase,
            payload=payload,
        )


class OutcomeStatus(str, Enum):
    RECOVERED = "Recovered"
    FAILED_LOCAL = "FailedLocal"
    ESCALATED = "Escalated"
    ABORTED_THREAD = "AbortedThread"


@dataclass(frozen=True)
class FlowResult:
    decision: FlowControlDecision
    redispatch: bool = False
    skipped_step: str | None = None
    thread_aborted: bool = False


@dataclass(frozen=True)
class RecoveryResult:
    action: StateRecoveryAction
    digest_before: str
    digest_after: str
    detail: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class HandlingOutcome:
    status: OutcomeStatus
    attempts_used: int
    flow: FlowControlDecision | None
    recovery_applied: StateRecoveryAction
    pattern_id: str
    reason: str = ""
    flow_result: FlowResult | None = None
    recovery_result: RecoveryResult | None = None

    def __post_init__(self) -> None:
        if self.status is OutcomeStatus.RECOVERED and self.flow not in (
            FlowControlDecision.CONTINUE,
            FlowControlDecision.SKIP,
        ):
            raise ValueError("a recovered outcome needs flow Continue or Skip")
        if self.status is OutcomeStatus.ABORTED_THREAD and self.flow is not FlowControlDecision.ABORT:
            raise ValueError("an aborted-thread outcome needs flow Abort")

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "attempts_used": self.attempts_used,
            "flow": self.flow.value if self.flow else None,
            "recovery_applied": self.recovery_applied.value,
            "pattern_id": self.pattern_id,
            "reason": self.reason,
        }


# ---------------------------------------------------------------- handlers


@dataclass(frozen=True)
class MechanismHandler:
    mechanism: LocalHandlingMechanism
    attempt: Callable[[HandlingContext], LocalResult]
    retry_class: bool = False


_SCHEMA_RE = re.compile(r"(?i)json|schema|field|format|bracket|brace|parse")


def _retry(ctx: HandlingContext) -> LocalResult:
    return ctx.runtime.redispatch(ctx)


def _switch_tool(ctx: HandlingContext) -> LocalResult:
    return ctx.runtime.switch_tool(ctx)


def _fallback(ctx: HandlingContext) -> LocalResult:
    return LocalResult.success("default template substituted for the step output", step_completed=True)


def _schema_validation(ctx: HandlingContext) -> LocalResult:
    if _SCHEMA_RE.search(ctx.signal.message):
        return LocalResult.success("schema defect located; output will be regenerated")
    return LocalResult.failure("signal does not describe a schema defect")


def _output_truncation(ctx: HandlingContext) -> LocalResult:
    return LocalResult.success("oversized content trimmed to budget")


def _reset_memory(ctx: HandlingContext) -> LocalResult:
    return ctx.runtime.reset_memory(ctx)


def _abort_task_chain(ctx: HandlingContext) -> LocalResult:
    return LocalResult.success("task chain halted")


def _escalate_to_human(ctx: HandlingContext) -> LocalResult:
    if not ctx.classification.is_classified:
        return LocalResult.needs_escalation("unclassified exception needs diagnosis first")
    ctx.runtime.notify_human(ctx, f"{ctx.pattern.local.label} for {ctx.classification.exception_id}")
    return LocalResult.success("queued for a human supervisor")


def _peer_confirmation(ctx: HandlingContext) -> LocalResult:
    return LocalResult.success("shared state confirmed with peers")


def _latest_plan_event(ctx: HandlingContext):
    plans = ctx.log.query(thread_id=ctx.thread_id, kind=EventKind.PLAN_GENERATED)
    plans = [e for e in plans if e.seq < ctx.symptom_seq]
    return plans[-1] if plans else None


def _plan_repair(ctx: HandlingContext) -> LocalResult:
    chain = ctx.chain
    if chain is not None and chain.root.phase is Phase.REASONING_PLANNING:
        root = chain.root
        entities = root_cause_entities(chain, ctx.signal)
    else:
        root = _latest_plan_event(ctx)
        if root is None:
            return LocalResult.failure("no plan event to repair")
        entities = root.entities & extract_entities(ctx.signal.message)
    constraints = derive_constraints(entities, ctx.runtime.protected_paths)
    if not constraints:
        return LocalResult.failure("no constraint could be derived from the root cause")
    try:
        directive = synthesize_corrective_directive(
            root, ctx.runtime.goal_for(ctx.mission_id), " ".join(constraints), entities
        )
    except DirectiveError as exc:
        return LocalResult.failure(str(exc))
    # the directive is on record before the reasoner sees it
    ctx.emit(
        EventKind.DIRECTIVE_ISSUED,
        {
            "directive": directive.text,
            "constraints": list(directive.injected_constraints),
            "root_seq": directive.provenance,
            "target": directive.target,
        },
        phase=Phase.REASONING_PLANNING,
    )
    if ctx.runtime.repair_plan(ctx, directive):
        return LocalResult.success("reasoner produced a compliant plan", step_completed=True)
    return LocalResult.failure("reasoner produced no compliant plan")


_CONCRETE: dict[LocalHandlingMechanism, tuple[Callable[[HandlingContext], LocalResult], bool]] = {
    M.RETRY_WITH_BACKOFF: (_retry, True),
    M.SWITCH_TOOL: (_switch_tool, False),
    M.FALLBACK: (_fallback, False),
    M.SCHEMA_VALIDATION: (_schema_validation, False),
    M.OUTPUT_TRUNCATION: (_output_truncation, False),
    M.RESET_MEMORY: (_reset_memory, False),
    M.PLAN_REPAIR: (_plan_repair, False),
    M.ABORT_TASK_CHAIN: (_abort_task_chain, False),
    M.TIMEOUT_ESCALATION: (_escalate_to_human, False),
    M.ESCALATE_TO_HUMAN: (_escalate_to_human, False),
    M.PEER_CONFIRMATION: (_peer_confirmation, False),
}


def _stub(ctx: HandlingContext) -> LocalResult:
    return LocalResult.not_implemented()


HANDLERS: dict[LocalHandlingMechanism, MechanismHandler] = {
    m: MechanismHandler(m, *_CONCRETE.get(m, (_stub, False))) for m in LocalHandlingMechanism
}


def handler_for(mechanism: LocalHandlingMechanism) -> MechanismHandler:
    return HANDLERS[mechanism]


# ------------------------------------------------------------ flow/recovery


def apply_flow(
    decision: FlowControlDecision, ctx: HandlingContext, local: LocalResult | None = None
) -> FlowResult:
    step_completed = local.step_completed if local is not None else False
    if decision is FlowControlDecision.SKIP:
        dependents = ctx.runtime.hard_dependents(ctx.thread_id, ctx.step_ref)
        if dependents:
            raise DependencyViolation(
                f"skipping {ctx.step_ref} starves hard dependents {sorted(dependents)}"
            )
        ctx.emit(EventKind.FLOW_APPLIED, {"decision": decision.value, "step_id": ctx.step_ref})
        ctx.emit(EventKind.STEP_SKIPPED, {"step_id": ctx.step_ref})
        return FlowResult(decision, skipped_step=ctx.step_ref)
    if decision is FlowControlDecision.ABORT:
        ctx.emit(EventKind.FLOW_APPLIED, {"decision": decision.value, "step_id": ctx.step_ref})
        ctx.emit(
            EventKind.THREAD_ABORTED,
            {"reason": f"{ctx.pattern.pattern_id} aborts the thread", "step_id": ctx.step_ref},
        )
        return FlowResult(decision, thread_aborted=True)
    ctx.emit(
        EventKind.FLOW_APPLIED,
        {"decision": decision.value, "step_id": ctx.step_ref, "redispatch": not step_completed},
    )
    return FlowResult(decision, redispatch=not step_completed)


_MEMORY_SCOPED = {
    ArtifactKind.MEMORY,
    ArtifactKind.CONTEXT,
    ArtifactKind.KNOWLEDGE_BASE,
    ArtifactKind.REASONING,
    ArtifactKind.GOAL,
}


def rollback_scope(artifact: ArtifactKind | None) -> ArtifactKind:
    """Checkpoint scope restored by Rollback for an exception's artifact."""
    return ArtifactKind.MEMORY if artifact in _MEMORY_SCOPED else ArtifactKind.TASK_FLOW


def apply_recovery(action: StateRecoveryAction, ctx: HandlingContext) -> RecoveryResult:
    runtime = ctx.runtime
    before = state_digest(runtime.full_state())
    detail: dict[str, Any] = {}
    if action is StateRecoveryAction.ROLLBACK:
        scope = rollback_scope(ctx.classification.artifact)
        ckpt = runtime.checkpoints.latest(ctx.thread_id, scope)
        if ckpt is None:
            raise StateRecoveryError(f"no {scope.value} checkpoint for thread {ctx.thread_id}")
        state = runtime.checkpoints.restore(ckpt.checkpoint_id)
        runtime.restore_scope(scope, state)
        restored = state_digest(runtime.scope_state(scope))
        if restored != ckpt.state_digest:
            raise StateRecoveryError(f"rollback to {ckpt.checkpoint_id} left a different state")
        detail = {"checkpoint_id": ckpt.checkpoint_id, "scope": scope.value, "digest": restored}
    elif action is StateRecoveryAction.COMPENSATE:
        inverses = []
        for effect in reversed(runtime.step_effects(ctx.thread_id, ctx.step_ref)):
            inverses.append(runtime.compensate(effect))
        detail = {"inverses": inverses}
    after = state_digest(runtime.full_state())
    if action is StateRecoveryAction.NO_OP and after != before:
        raise StateRecoveryError("state changed under a No-op recovery")
    ctx.emit(
        EventKind.RECOVERY_APPLIED,
        {"action": action.value, "digest_before": before, "digest_after": after, **detail},
    )
    return RecoveryResult(action, before, after, detail)


# ------------------------------------------------------------------ handle


class _LocalFailure(Exception):
    def __init__(self, result: LocalResult):
        super().__init__(result.reason)
        self.result = result


class _LocalStop(Exception):
    def __init__(self, result: LocalResult):
        super().__init__(result.reason)
        self.result = result


def handle(ctx: HandlingContext) -> HandlingOutcome:
    """Run one handler pattern against a classified exception."""
    pattern = ctx.pattern
    handler = handler_for(pattern.local)
    ctx.budget = ctx.policy.max_attempts if handler.retry_class else 1

    def attempt(k: int) -> LocalResult:
        ctx.budget -= 1
        result = handler.attempt(ctx)
        ctx.emit(
            EventKind.LOCAL_ATTEMPT,
            {
                "attempt": k,
                "mechanism": pattern.local.label,
                "pattern_id": pattern.pattern_id,
                "result": result.status.value,
                "reason": result.reason,
            },
        )
        if result.status is LocalStatus.FAILURE:
            raise _LocalFailure(result)
        if result.status is not LocalStatus.SUCCESS:
            raise _LocalStop(result)
        return result

    policy = ctx.policy if handler.retry_class else RetryPolicy(max_attempts=1)
    try:
        run = retry_with_backoff(
            policy, attempt, retry_on=_LocalFailure, rng=ctx.rng, on_delay=_advance(ctx.log)
        )
    except Exhausted as exc:
        reason = exc.last_failure.result.reason if isinstance(exc.last_failure, _LocalFailure) else ""
        return _failed(pattern, exc.max_attempts, f"local handling exhausted: {reason}")
    except _LocalStop as exc:
        used = (ctx.policy.max_attempts if handler.retry_class else 1) - ctx.budget
        return _failed(pattern, used, f"{exc.result.status.value}: {exc.result.reason}")

    local: LocalResult = run.value
    try:
        flow = apply_flow(pattern.flow, ctx, local)
    except DependencyViolation as exc:
        return _failed(pattern, run.attempts, str(exc))
    recovery = apply_recovery(pattern.recovery, ctx)
    status = (
        OutcomeStatus.ABORTED_THREAD
        if pattern.flow is FlowControlDecision.ABORT
        else OutcomeStatus.RECOVERED
    )
    return HandlingOutcome(
        status=status,
        attempts_used=run.attempts,
        flow=pattern.flow,
        recovery_applied=pattern.recovery,
        pattern_id=pattern.pattern_id,
        reason=local.reason,
        flow_result=flow,
        recovery_result=recovery,
    )


def _advance(log: EventLog) -> Callable[[int | Fraction], None]:
    return lambda delay: log.advance(int(delay))


def _failed(pattern: HandlerPattern, attempts: int, reason: str) -> HandlingOutcome:
    return HandlingOutcome(
        status=OutcomeStatus.FAILED_LOCAL,
        attempts_used=attempts,
        flow=None,
        recovery_applied=StateRecoveryAction.NO_OP,
        pattern_id=pattern.pattern_id,
        reason=reason,
    )

"""Shared fakes, generators and brute-force oracles for the test suite."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from shielda.agentops import CheckpointStore, EventKind, EventLog, WorkflowEvent
from shielda.canonical import load_canonical
from shielda.classifier import Classification, Origin, RawExceptionSignal
from shielda.entities import EntityKind, EntityRef
from shielda.executor import HandlingContext, LocalResult, RetryPolicy
from shielda.simharness import EnvironmentState
from shielda.taxonomy import Phase


@dataclass
class FakeRuntime:
    """Runtime backed by an in-memory environment; handler hooks are scripted."""

    env: EnvironmentState = field(default_factory=EnvironmentState)
    checkpoints: CheckpointStore = field(default_factory=CheckpointStore)
    protected_paths: tuple[str, ...] = ()
    goal: str = "ship the change"
    redispatch_results: list[LocalResult] = field(default_factory=list)
    repair_ok: bool = True
    dependents: list[str] = field(default_factory=list)
    notified: list[str] = field(default_factory=list)
    directives: list[Any] = field(default_factory=list)

    def goal_for(self, mission_id: str) -> str:
        return self.goal

    def redispatch(self, ctx) -> LocalResult:
        if self.redispatch_results:
            return self.redispatch_results.pop(0)
        return LocalResult.failure("still failing")

    def switch_tool(self, ctx) -> LocalResult:
        return LocalResult.failure("no backup tool configured")

    def reset_memory(self, ctx) -> LocalResult:
        self.env.memory.clear()
        return LocalResult.success("memory cleared")

    def repair_plan(self, ctx, directive) -> bool:
        self.directives.append(directive)
        return self.repair_ok

    def notify_human(self, ctx, reason: str) -> None:
        self.notified.append(reason)

    def scope_state(self, scope):
        return self.env.scope_state(scope)

    def restore_scope(self, scope, state) -> None:
        self.env.restore_scope(scope, state)

    def full_state(self):
        return self.env.full_state()

    def step_effects(self, thread_id, step_ref):
        return [
            e
            for e in self.env.effective_ledger()
            if e["thread_id"] == thread_id and e["step_id"] == step_ref
        ]

    def compensate(self, effect):
        return self.env.compensate(effect)

    def hard_dependents(self, thread_id, step_ref):
        return list(self.dependents)


def make_ctx(
    pattern_id: str,
    exception_id: str = "tool.invocation",
    *,
    message: str = "tool `search` failed with 500",
    runtime: FakeRuntime | None = None,
    log: EventLog | None = None,
    step_ref: str = "s1",
    policy: RetryPolicy | None = None,
    chain=None,
) -> HandlingContext:
    data = load_canonical()
    entry = data.taxonomy.lookup(exception_id)
    classification = (
        Classification(exception_id, Phase.EXECUTION if entry.phase is Phase.BOTH else entry.phase, entry.artifact)
        if entry is not None
        else Classification(exception_id, Phase.EXECUTION)
    )
    log = log or EventLog()
    signal = RawExceptionSignal(message, Origin.TOOL_CALL, thread_id="t1", step_ref=step_ref)
    symptom = log.append(
        EventKind.EXCEPTION_RAISED,
        thread_id="t1",
        mission_id="m1",
        phase=Phase.EXECUTION,
        payload={"signal": signal.to_dict(), "step_id": step_ref},
    )
    return HandlingContext(
        classification=classification,
        signal=signal,
        thread_id="t1",
        mission_id="m1",
        step_ref=step_ref,
        pattern=data.registry.get(pattern_id),
        runtime=runtime or FakeRuntime(),
        log=log,
        symptom_seq=symptom,
        chain=chain,
        policy=policy or RetryPolicy(),
    )


# ------------------------------------------------------------ trace oracle


def brute_force_chain(events: list[WorkflowEvent], symptom_seq: int, seeds) -> set[int]:
    """Entity-connected ancestors of the symptom, cut below the nearest RP member.

    An event is connected when it shares an entity with some already
    connected, later event of the same mission (the symptom counts with its
    seed set).  The closure is computed by repeated full passes until nothing
    changes, then every member older than the latest reasoning/planning
    ancestor is dropped.
    """
    by_seq = {e.seq: e for e in events}
    symptom = by_seq[symptom_seq]
    ents = {symptom_seq: set(seeds)}
    members = {symptom_seq}
    changed = True
    while changed:
        changed = False
        for e in events:
            if e.seq >= symptom_seq or e.seq in members or e.mission_id != symptom.mission_id:
                continue
            if any(m > e.seq and ents[m] & e.entities for m in members):
                members.add(e.seq)
                ents[e.seq] = set(e.entities)
                changed = True
    rp = [m for m in members if m != symptom_seq and by_seq[m].phase is Phase.REASONING_PLANNING]
    if rp:
        cut = max(rp)
        members = {m for m in members if m >= cut}
    return members


@dataclass
class PlantedLog:
    events: list[WorkflowEvent]
    symptom_seq: int
    seeds: frozenset
    planted: list[int]


def _ref(kind: EntityKind, value: str) -> EntityRef:
    return EntityRef(kind, value)


def planted_chain_log(rng: random.Random, n_events: int, chain_len: int) -> PlantedLog:
    """Log with a planted entity chain ending at the last event.

    Chain events share one link entity with their neighbour; the oldest chain
    member is an RP event.  Noise events carry unique entities except that,
    with some probability, an RP noise event is placed before the chain root
    reusing a chain entity (it must stay excluded because the root cuts the
    scan first).
    """
    log = EventLog()
    positions = sorted(rng.sample(range(1, n_events), chain_len))
    chain_set = set(positions)
    links = [_ref(EntityKind.FILE_PATH, f"src/link_{i}.py") for i in range(chain_len + 1)]
    planted: list[int] = []
    for seq in range(1, n_events + 1):
        if seq in chain_set:
            i = positions.index(seq)
            entities = {links[i], links[i + 1]}
            phase = Phase.REASONING_PLANNING if i == 0 else Phase.EXECUTION
            planted.append(seq)
        elif seq == n_events:
            entities = {links[chain_len]}
            phase = Phase.EXECUTION
        else:
            entities = {_ref(EntityKind.IDENTIFIER, f"noise_{seq}")}
            phase = rng.choice([Phase.REASONING_PLANNING, Phase.EXECUTION])
            if seq < positions[0] and rng.random() < 0.3:
                entities.add(links[0])
        # a few noise events belong to another mission
        mission = "m2" if seq not in chain_set and seq != n_events and rng.random() < 0.05 else "m1"
        log.append(
            EventKind.PLAN_STEP_STARTED,
            thread_id="t1",
            mission_id=mission,
            phase=phase,
            payload={"step_id": f"s{seq}", "action": "InvokeTool"},
            entities=entities,
        )
    events = list(log.events)
    planted.append(n_events)
    return PlantedLog(events, n_events, frozenset({links[chain_len]}), sorted(planted))


def random_entity_log(rng: random.Random, n_events: int, vocab: int) -> list[WorkflowEvent]:
    """Dense random log where entities are drawn from a small shared vocabulary."""
    log = EventLog()
    pool = [_ref(EntityKind.IDENTIFIER, f"e{i}") for i in range(vocab)]
    for seq in range(1, n_events + 1):
        k = rng.randint(0, 3)
        log.append(
            EventKind.PLAN_STEP_STARTED,
            thread_id="t1",
            mission_id=rng.choice(["m1", "m1", "m1", "m2"]),
            phase=rng.choice([Phase.REASONING_PLANNING, Phase.EXECUTION, Phase.EXECUTION]),
            payload={"step_id": f"s{seq}", "action": "InvokeTool"},
            entities=rng.sample(pool, k),
        )
    return list(log.events)



# ------------------------------------------------------- recovery trials


def recovery_trial(seed: int) -> dict[str, bool]:
    """One randomized mutate/checkpoint sequence checked against all three recovery laws.

    Returns a pass flag per law: NoOp leaves the digest alone, Rollback
    brings the scope back to the checkpoint digest, Compensate returns the
    effective ledger to its value before the step ran.
    """
    from shielda.agentops import state_digest
    from shielda.executor import apply_recovery
    from shielda.registry import StateRecoveryAction
    from shielda.taxonomy import ArtifactKind

    rng = random.Random(seed)
    runtime = FakeRuntime()
    env = runtime.env
    log = EventLog()
    scopes = {ArtifactKind.MEMORY: "memory.poisoning", ArtifactKind.TASK_FLOW: "taskflow.error_propagation"}
    checkpoints: dict[ArtifactKind, str] = {}

    def mutate(step_id: str) -> None:
        roll = rng.random()
        if roll < 0.35:
            env.memory[f"k{rng.randint(0, 5)}"] = f"v{rng.randint(0, 99)}"
        elif roll < 0.6:
            path = f"src/f{rng.randint(0, 5)}.py"
            env.files[path] = f"c{rng.randint(0, 99)}"
            if path not in env.pending:
                env.pending.append(path)
        elif roll < 0.7 and env.memory:
            del env.memory[rng.choice(sorted(env.memory))]
        else:
            kind = rng.choice(["comment", "review_request", "push"])
            env.record({"kind": kind, "target": f"x{rng.randint(0, 9)}", "step_id": step_id, "thread_id": "t1"})

    def checkpoint(scope: ArtifactKind) -> None:
        checkpoints[scope] = runtime.checkpoints.checkpoint("t1", scope, env.scope_state(scope))

    for i in range(rng.randint(3, 15)):
        if rng.random() < 0.25:
            checkpoint(rng.choice(list(scopes)))
        else:
            mutate(f"pre{i}")
    for scope in scopes:
        if scope not in checkpoints:
            checkpoint(scope)
    for i in range(rng.randint(0, 6)):
        mutate(f"post{i}")

    results: dict[str, bool] = {}

    ctx = make_ctx("P018", runtime=runtime, log=log)
    before = state_digest(runtime.full_state())
    rec = apply_recovery(StateRecoveryAction.NO_OP, ctx)
    results["noop"] = rec.digest_before == rec.digest_after == before == state_digest(runtime.full_state())

    scope = rng.choice(list(scopes))
    ctx = make_ctx("P027", scopes[scope], runtime=runtime, log=log)
    apply_recovery(StateRecoveryAction.ROLLBACK, ctx)
    expected = runtime.checkpoints.get(checkpoints[scope]).state_digest
    results["rollback"] = state_digest(env.scope_state(scope)) == expected

    ledger_before = env.effective_ledger()
    step = "victim"
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(["comment", "review_request", "push"])
        env.record({"kind": kind, "target": f"y{rng.randint(0, 9)}", "step_id": step, "thread_id": "t1"})
    ctx = make_ctx("P037", "interface.ui_misclick", runtime=runtime, log=log, step_ref=step)
    apply_recovery(StateRecoveryAction.COMPENSATE, ctx)
    results["compensate"] = env.effective_ledger() == ledger_before
    return results

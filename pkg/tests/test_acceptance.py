"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with output capture
switched off before asserting, so a plain ``pytest`` run shows the verdicts.
"""

import random
import time
from fractions import Fraction

import pytest

from shielda.canonical import load_canonical
from shielda.errors import Exhausted
from shielda.escalation import root_cause_trace
from shielda.executor import RetryPolicy, retry_with_backoff
from shielda.registry import resolve, validate_pattern
from shielda.replay import replay
from shielda.simharness import (
    BUILTIN_SCENARIOS,
    WORKFLOW_CONSTRAINT,
    MissionStatus,
    RunConfig,
    builtin_scenario,
    load_golden_trace,
    random_fault_scenario,
    run_scenario,
)
from tests.helpers import brute_force_chain, planted_chain_log, recovery_trial
from tests.oracles import PATTERN_ROWS, PRIMARY_MAPPING_IDS, PRIMARY_MAPPING_ROWS, TAXONOMY_ROWS, nominal_backoff
from tests.test_registry import fuzz_triads


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})")
        assert ok, detail

    return report


def test_criterion_1_autopr_golden_trace(verdict):
    scenario = builtin_scenario("autopr")
    start = time.perf_counter()
    report = run_scenario(scenario)
    elapsed = time.perf_counter() - start
    golden = load_golden_trace("autopr")
    matches = tuple(report.event_kinds) == golden
    directive = any(WORKFLOW_CONSTRAINT in d.text for d in report.directives)
    completed = report.final_status is MissionStatus.COMPLETED and report.event_kinds[-1] == "MissionCompleted"
    ok = matches and directive and completed and elapsed < 1.0 and len(golden) == 30
    verdict(1, "AutoPR golden trace", ok,
             f"trace match={matches}, {len(report.events)} events, directive={directive}, "
             f"completed={completed}, {elapsed:.3f}s")


def test_criterion_2_data_fidelity(verdict):
    data = load_canonical()
    rows = [(e.display_name, e.artifact.value, e.phase.value) for e in data.taxonomy]
    taxonomy_ok = rows == list(TAXONOMY_ROWS) and len(rows) == 36 and len(data.taxonomy.artifacts) == 12
    patterns = [p.to_dict() for p in data.registry.patterns.values()]
    want = [{"id": i, "local": l, "flow": f, "recovery": r} for i, l, f, r in PATTERN_ROWS]
    patterns_ok = patterns == want and len(patterns) == 48
    exact = 0
    for name, _artifact, pid, local, flow, recovery in PRIMARY_MAPPING_ROWS:
        p = resolve(data.registry, PRIMARY_MAPPING_IDS[name])
        exact += (p.pattern_id, p.local_label, p.flow.value, p.recovery.value) == (pid, local, flow, recovery)
    ok = taxonomy_ok and patterns_ok and exact == 12
    verdict(2, "data fidelity", ok,
             f"{len(rows)} entries / {len(data.taxonomy.artifacts)} artifacts ok={taxonomy_ok}, "
             f"{len(patterns)} patterns ok={patterns_ok}, {exact}/12 mappings exact")


def test_criterion_3_pattern_validation(verdict):
    data = load_canonical()
    valid = 0
    for p in data.registry.patterns.values():
        validate_pattern(p.local_label, p.flow.value, p.recovery.value)
        valid += 1
    agree, accepted = fuzz_triads(n=1000, seed=7)
    ok = valid == len(data.registry) == 48 and agree == 1000
    verdict(3, "pattern validation", ok,
             f"{valid}/48 patterns valid, fuzz {agree}/1000 agree ({accepted} accepted)")


def test_criterion_4_root_cause_trace_oracle(verdict):
    agree = 0
    for i in range(50):
        rng = random.Random(1000 + i)
        chain_len = 1 + i % 5
        planted = planted_chain_log(rng, rng.randint(chain_len + 1, 200), chain_len)
        chain = root_cause_trace(planted.events, planted.symptom_seq, planted.seeds)
        oracle = brute_force_chain(planted.events, planted.symptom_seq, planted.seeds)
        agree += set(chain.seqs) == oracle and sorted(chain.seqs) == planted.planted
    verdict(4, "root-cause trace vs oracle", agree == 50, f"{agree}/50 logs agree")


def test_criterion_5_recovery_laws(verdict):
    totals = {"noop": 0, "rollback": 0, "compensate": 0}
    for seed in range(200):
        for law, ok in recovery_trial(seed).items():
            totals[law] += ok
    ok = all(v == 200 for v in totals.values())
    verdict(5, "state recovery laws", ok, ", ".join(f"{k} {v}/200" for k, v in totals.items()))


def test_criterion_6_determinism_and_replay(verdict):
    data = load_canonical()
    scenarios = [("autopr", builtin_scenario)] + [(s, random_fault_scenario) for s in range(100)]
    identical = clean = 0
    for key, make in scenarios:
        a = run_scenario(make(key), RunConfig(seed=42))
        b = run_scenario(make(key), RunConfig(seed=42))
        identical += a.log_text().encode() == b.log_text().encode()
        clean += replay(list(a.events), data.registry, data.rules).clean
    n = len(scenarios)
    verdict(6, "determinism and replay", identical == clean == n,
             f"{identical}/{n} byte-identical, {clean}/{n} replays with zero divergences")


def test_criterion_7_backoff_law(verdict):
    cases = exact = bounded = 0
    for base in (0, 1, 7, 100, 250):
        for mult in (1, 2, 3, Fraction(3, 2), Fraction(5, 4)):
            for max_attempts in range(1, 7):
                for succeed_at in range(1, 9):
                    calls = []

                    def op(k):
                        calls.append(k)
                        if k < succeed_at:
                            raise RuntimeError(k)
                        return k

                    policy = RetryPolicy(base_delay=base, multiplier=mult, max_attempts=max_attempts, jitter=0.0)
                    try:
                        delays = retry_with_backoff(policy, op).delays
                    except Exhausted as exc:
                        delays = exc.delays
                    cases += 1
                    want = [nominal_backoff(base, mult, k) for k in range(1, len(delays) + 1)]
                    exact += [Fraction(d) for d in delays] == want and len(delays) == min(succeed_at - 1, max_attempts)
                    bounded += len(calls) <= max_attempts
    ok = exact == bounded == cases
    verdict(7, "backoff law", ok, f"{exact}/{cases} exact schedules, {bounded}/{cases} within max attempts")


def test_criterion_8_bounded_escalation(verdict):
    adversarial = run_scenario(builtin_scenario("adversarial"))
    terminated = adversarial.final_status is MissionStatus.TERMINATED
    depth_ok = adversarial.max_depth <= 3
    largest = 0
    for name in BUILTIN_SCENARIOS:
        largest = max(largest, len(run_scenario(builtin_scenario(name)).events))
    for seed in range(100):
        largest = max(largest, len(run_scenario(random_fault_scenario(seed)).events))
    ok = terminated and depth_ok and largest <= 10_000
    verdict(8, "bounded escalation", ok,
             f"adversarial {adversarial.final_status.value} at depth {adversarial.max_depth}, "
             f"largest run {largest} events")

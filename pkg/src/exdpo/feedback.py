"""Execution feedback: run a response against unit tests and grade it."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .minilang import DEFAULT_STEP_LIMIT, ExecError, ParseFailure, execute, parse_source

__all__ = [
    "OutcomeClass",
    "TestResult",
    "ExecutionOutcome",
    "Verdict",
    "REWARD_LEVELS",
    "run_against_tests",
    "rule_reward",
    "classify",
]


class OutcomeClass(str, enum.Enum):
    PASSED_ALL = "PassedAll"
    FAILED_TEST = "FailedTest"
    RUNTIME_ERROR = "RuntimeError"
    COMPILE_ERROR = "CompileError"


class Verdict(str, enum.Enum):
    CHOSEN = "Chosen"
    REJECTED = "Rejected"


# Coarse execution-based reward: one level per outcome class.
REWARD_LEVELS = {
    OutcomeClass.PASSED_ALL: 1.0,
    OutcomeClass.FAILED_TEST: -0.3,
    OutcomeClass.RUNTIME_ERROR: -0.6,
    OutcomeClass.COMPILE_ERROR: -1.0,
}


@dataclass(frozen=True)
class TestResult:
    """One test's result: ``pass``, ``wrong_output`` or ``runtime_error``."""

    __test__ = False  # not a pytest class

    status: str
    error_kind: str | None = None


PASS = TestResult("pass")
WRONG = TestResult("wrong_output")


@dataclass(frozen=True)
class ExecutionOutcome:
    outcome_class: OutcomeClass
    per_test: tuple[TestResult, ...] | None = None

    def __post_init__(self):
        if (self.outcome_class is OutcomeClass.COMPILE_ERROR) != (self.per_test is None):
            raise ValueError("per_test is absent exactly for compile errors")

    @property
    def tests_passed(self) -> int:
        if self.per_test is None:
            return 0
        return sum(r.status == "pass" for r in self.per_test)


def run_against_tests(response_text: str, tests, step_limit: int = DEFAULT_STEP_LIMIT
                      ) -> ExecutionOutcome:
    """Parse ``response_text`` once and execute it on every test.

    All tests run even after a failure.  Any runtime error outranks a wrong
    answer when tests disagree.
    """
    if isinstance(response_text, (bytes, bytearray)):
        response_text = response_text.decode("latin-1")
    tests = list(tests)
    if not tests:
        raise ValueError("tests must be nonempty")
    try:
        program = parse_source(response_text)
    except ParseFailure:
        return ExecutionOutcome(OutcomeClass.COMPILE_ERROR)
    results = []
    for test in tests:
        try:
            value = execute(program, test.input, step_limit)
        except ExecError as exc:
            results.append(TestResult("runtime_error", exc.kind))
            continue
        results.append(PASS if value == test.expected else WRONG)
    statuses = {r.status for r in results}
    if "runtime_error" in statuses:
        cls = OutcomeClass.RUNTIME_ERROR
    elif "wrong_output" in statuses:
        cls = OutcomeClass.FAILED_TEST
    else:
        cls = OutcomeClass.PASSED_ALL
    return ExecutionOutcome(cls, tuple(results))


def rule_reward(outcome: ExecutionOutcome) -> float:
    return REWARD_LEVELS[outcome.outcome_class]


def classify(outcome: ExecutionOutcome) -> Verdict:
    if outcome.outcome_class is OutcomeClass.PASSED_ALL:
        return Verdict.CHOSEN
    return Verdict.REJECTED

"""Preference-pair construction from execution feedback.

Each task's prompt is sampled ``k`` times; every distinct response is run
against the task's tests and graded.  Tasks with at least one passing and
one failing response contribute a single (prompt, chosen, rejected) triple.
"""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ._seeding import derive_seed
from .feedback import (
    ExecutionOutcome,
    OutcomeClass,
    TestResult,
    Verdict,
    classify,
    rule_reward,
    run_against_tests,
)
from .minilang import DEFAULT_STEP_LIMIT
from .model import DEFAULT_MAX_LEN, ParamVector, sample_batch
from .taskgen import Task, render_prompt
from .vocab import decode, encode_prompt

__all__ = [
    "ResponseRecord",
    "PairMeta",
    "PreferencePair",
    "DatasetFormatError",
    "collect_responses",
    "build_pairs",
    "write_dataset",
    "read_dataset",
    "write_records",
    "read_records",
    "DEFAULT_K",
    "DEFAULT_TEMPERATURE",
]

DEFAULT_K = 8
DEFAULT_TEMPERATURE = 0.8


@dataclass(frozen=True)
class ResponseRecord:
    task_id: int
    prompt: str
    response_text: str
    outcome: ExecutionOutcome
    rule_reward: float
    sample_index: int
    n_tests: int

    @property
    def verdict(self) -> Verdict:
        return classify(self.outcome)

    @property
    def tests_passed(self) -> int:
        return self.outcome.tests_passed


@dataclass(frozen=True)
class PairMeta:
    chosen_tests_passed: int
    rejected_tests_passed: int
    rejected_class: str
    generator: str
    seed: int


@dataclass(frozen=True)
class PreferencePair:
    task_id: int
    prompt: str
    chosen: str
    rejected: str
    meta: PairMeta = field(compare=True)

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")


def sample_seed(seed: int, task_id: int, sample_index: int) -> int:
    return derive_seed("sample", seed, task_id, sample_index)


def collect_responses(params: ParamVector, tasks, k: int = DEFAULT_K,
                      temperature: float = DEFAULT_TEMPERATURE, seed: int = 0,
                      step_limit: int = DEFAULT_STEP_LIMIT,
                      max_len: int = DEFAULT_MAX_LEN) -> list[ResponseRecord]:
    """Sample ``k`` responses per task and grade each against all its tests.

    Repeated texts within a task are kept once, at their first sample
    index.  Records come back ordered by (task_id, sample_index).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    records = []
    for task in sorted(tasks, key=lambda t: t.id):
        prompt = render_prompt(task)
        prompt_ids = encode_prompt(prompt)
        seeds = [sample_seed(seed, task.id, i) for i in range(k)]
        seen = set()
        for index, ids in enumerate(sample_batch(params, prompt_ids, seeds, temperature, max_len)):
            text = decode(ids)
            if text in seen:
                continue
            seen.add(text)
            outcome = run_against_tests(text, task.all_tests, step_limit)
            records.append(ResponseRecord(task.id, prompt, text, outcome, rule_reward(outcome), index,
                                          len(task.all_tests)))
    return records


def build_pairs(records, seed: int = 0, generator: str = "") -> list[PreferencePair]:
    """One uniformly drawn (chosen, rejected) pair per mixed-verdict task.

    ``generator`` names the checkpoint that produced the records and is
    stored in every pair's metadata.
    """
    grouped: dict[int, list[ResponseRecord]] = defaultdict(list)
    for record in records:
        grouped[record.task_id].append(record)
    pairs = []
    for task_id in sorted(grouped):
        group = sorted(grouped[task_id], key=lambda r: r.sample_index)
        chosen = [r for r in group if r.verdict is Verdict.CHOSEN]
        rejected = [r for r in group if r.verdict is Verdict.REJECTED]
        if not chosen or not rejected:
            continue
        rng = random.Random(derive_seed("pair", seed, task_id))
        good = chosen[rng.randrange(len(chosen))]
        bad = rejected[rng.randrange(len(rejected))]
        meta = PairMeta(good.tests_passed, bad.tests_passed, bad.outcome.outcome_class.value,
                        generator, seed)
        pairs.append(PreferencePair(task_id, good.prompt, good.response_text,
                                    bad.response_text, meta))
    return pairs


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


_FIELDS = ("task_id", "prompt", "chosen", "rejected", "meta")
_META_FIELDS = tuple(PairMeta.__dataclass_fields__)


def _to_line(pair: PreferencePair) -> str:
    record = {
        "task_id": pair.task_id,
        "prompt": pair.prompt,
        "chosen": pair.chosen,
        "rejected": pair.rejected,
        "meta": asdict(pair.meta),
    }
    return json.dumps(record, separators=(",", ":"))


def write_dataset(pairs, path) -> None:
    text = "".join(_to_line(p) + "\n" for p in pairs)
    Path(path).write_text(text, encoding="ascii")


def _from_line(line: str) -> PreferencePair:
    record = json.loads(line)
    if not isinstance(record, dict) or set(record) != set(_FIELDS):
        raise ValueError(f"fields must be exactly {_FIELDS}")
    meta = record["meta"]
    if not isinstance(meta, dict) or set(meta) != set(_META_FIELDS):
        raise ValueError(f"meta fields must be exactly {_META_FIELDS}")
    for key in ("prompt", "chosen", "rejected"):
        if not isinstance(record[key], str):
            raise ValueError(f"{key} must be a string")
    return PreferencePair(
        int(record["task_id"]), record["prompt"], record["chosen"], record["rejected"],
        PairMeta(int(meta["chosen_tests_passed"]), int(meta["rejected_tests_passed"]),
                 str(meta["rejected_class"]), str(meta["generator"]), int(meta["seed"])),
    )


def _read_lines(path, parse_line) -> list:
    text = Path(path).read_text(encoding="ascii")
    lines = text.split("\n")
    if lines[-1] != "":
        raise DatasetFormatError(path, len(lines), "truncated last line")
    out = []
    for lineno, line in enumerate(lines[:-1], 1):
        try:
            out.append(parse_line(line))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from exc
    return out


def read_dataset(path) -> list[PreferencePair]:
    """Read pairs written by :func:`write_dataset`.

    Unknown or missing fields, bad JSON and an unterminated last line all
    raise :class:`DatasetFormatError` carrying the 1-based line number.
    """
    return _read_lines(path, _from_line)


_RECORD_FIELDS = ("task_id", "sample_index", "prompt", "response", "outcome", "per_test",
                  "rule_reward", "n_tests")


def _record_line(record: ResponseRecord) -> str:
    per_test = record.outcome.per_test
    return json.dumps({
        "task_id": record.task_id,
        "sample_index": record.sample_index,
        "prompt": record.prompt,
        "response": record.response_text,
        "outcome": record.outcome.outcome_class.value,
        "per_test": None if per_test is None else [[r.status, r.error_kind] for r in per_test],
        "rule_reward": record.rule_reward,
        "n_tests": record.n_tests,
    }, separators=(",", ":"))


def _record_from_line(line: str) -> ResponseRecord:
    data = json.loads(line)
    if not isinstance(data, dict) or set(data) != set(_RECORD_FIELDS):
        raise ValueError(f"fields must be exactly {_RECORD_FIELDS}")
    per_test = data["per_test"]
    if per_test is not None:
        per_test = tuple(TestResult(str(status), kind) for status, kind in per_test)
    outcome = ExecutionOutcome(OutcomeClass(data["outcome"]), per_test)
    if data["rule_reward"] != rule_reward(outcome):
        raise ValueError("rule_reward inconsistent with outcome")
    return ResponseRecord(int(data["task_id"]), str(data["prompt"]), str(data["response"]),
                          outcome, rule_reward(outcome), int(data["sample_index"]),
                          int(data["n_tests"]))


def write_records(records, path) -> None:
    Path(path).write_text("".join(_record_line(r) + "\n" for r in records), encoding="ascii")


def read_records(path) -> list[ResponseRecord]:
    return _read_lines(path, _record_from_line)

"""Greedy pass@1 and implicit-reward analysis."""

from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from .feedback import OutcomeClass, Verdict, classify, run_against_tests
from .model import DEFAULT_MAX_LEN, ParamVector, greedy_decode_batch, sequence_logprobs
from .taskgen import render_prompt
from .vocab import decode, encode_prompt, encode_response

__all__ = [
    "EvalReport",
    "MarginReport",
    "InsufficientDataError",
    "evaluate",
    "pass_at_1",
    "implicit_rewards",
    "implicit_reward_diff",
    "margin_report",
    "write_report",
    "outcome_histogram",
]


@dataclass
class EvalReport:
    pass1_public: float
    pass1_all: float
    n_tasks: int
    tasks: list[dict] = field(default_factory=list)

    def pass1(self, which_tests: str = "all") -> float:
        if which_tests not in ("public", "all"):
            raise ValueError("which_tests must be 'public' or 'all'")
        return self.pass1_public if which_tests == "public" else self.pass1_all

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(params: ParamVector, tasks, max_len: int = DEFAULT_MAX_LEN) -> EvalReport:
    """Greedy-decode every task once and grade on public and on all tests."""
    tasks = sorted(tasks, key=lambda t: t.id)
    if not tasks:
        raise ValueError("tasks must be nonempty")
    prompts = [encode_prompt(render_prompt(t)) for t in tasks]
    responses = greedy_decode_batch(params, prompts, max_len)
    rows = []
    for task, ids in zip(tasks, responses):
        text = decode(ids)
        public = run_against_tests(text, task.public_tests)
        full = run_against_tests(text, task.all_tests)
        rows.append({
            "task_id": task.id,
            "response": text,
            "public": classify(public).value,
            "all": classify(full).value,
            "outcome": full.outcome_class.value,
            "tests_passed": full.tests_passed,
        })
    chosen = Verdict.CHOSEN.value
    n = len(rows)
    return EvalReport(
        pass1_public=sum(r["public"] == chosen for r in rows) / n,
        pass1_all=sum(r["all"] == chosen for r in rows) / n,
        n_tasks=n,
        tasks=rows,
    )


def pass_at_1(params: ParamVector, tasks, which_tests: str = "all") -> EvalReport:
    """Like :func:`evaluate`; ``report.pass1(which_tests)`` is the headline number."""
    if which_tests not in ("public", "all"):
        raise ValueError("which_tests must be 'public' or 'all'")
    return evaluate(params, tasks)


def _logprobs(params: ParamVector, items, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for lo in range(0, len(items), chunk):
            out.append(sequence_logprobs(params.tensor(), params.config,
                                         items[lo:lo + chunk]).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def implicit_rewards(policy: ParamVector, ref: ParamVector, prompt_response_pairs,
                     beta: float = 0.1) -> np.ndarray:
    """``beta * log(policy / ref)`` per response; defined up to a per-prompt shift."""
    items = [(encode_prompt(p), encode_response(r)) for p, r in prompt_response_pairs]
    return beta * (_logprobs(policy, items) - _logprobs(ref, items))


def implicit_reward_diff(policy: ParamVector, ref: ParamVector, prompt: str, y1: str, y2: str,
                         beta: float = 0.1) -> float:
    """Reward of ``y1`` minus reward of ``y2`` for the same prompt."""
    r1, r2 = implicit_rewards(policy, ref, [(prompt, y1), (prompt, y2)], beta)
    return float(r1 - r2)


class InsufficientDataError(ValueError):
    pass


@dataclass
class MarginReport:
    rewards: list[dict]
    pairs: list[dict]
    task_correlations: dict[int, float]
    correlation: float | None
    beta: float

    def same_class_rule_diffs(self) -> list[float]:
        return [p["rule_diff"] for p in self.pairs if p["class_1"] == p["class_2"]]

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "correlation": self.correlation,
            "n_tasks_correlated": len(self.task_correlations),
            "task_correlations": {str(k): v for k, v in sorted(self.task_correlations.items())},
            "pairs": self.pairs,
            "rewards": self.rewards,
        }


def margin_report(policy: ParamVector, ref: ParamVector, records, beta: float = 0.1
                  ) -> MarginReport:
    """Compare implicit and rule rewards among rejected responses.

    Every same-task pair of rejected responses that pass a different number
    of tests is reported with ``y1`` the one passing more.  The aggregate
    correlation is the mean over tasks of the within-task Spearman
    correlation between implicit reward and fraction of tests passed; tasks
    where either side is constant have no correlation and are skipped.
    """
    rejected = [r for r in records if r.verdict is Verdict.REJECTED]
    rewards = implicit_rewards(policy, ref, [(r.prompt, r.response_text) for r in rejected], beta)
    by_task: dict[int, list[tuple]] = defaultdict(list)
    reward_rows = []
    for record, reward in zip(rejected, rewards):
        fraction = record.tests_passed / record.n_tests
        by_task[record.task_id].append((record, float(reward), fraction))
        reward_rows.append({
            "task_id": record.task_id,
            "sample_index": record.sample_index,
            "class": record.outcome.outcome_class.value,
            "tests_passed": record.tests_passed,
            "implicit_reward": float(reward),
        })

    pair_rows = []
    correlations: dict[int, float] = {}
    for task_id in sorted(by_task):
        group = by_task[task_id]
        for a, b in itertools.combinations(group, 2):
            if a[0].tests_passed == b[0].tests_passed:
                continue
            hi, lo = (a, b) if a[0].tests_passed > b[0].tests_passed else (b, a)
            pair_rows.append({
                "task_id": task_id,
                "sample_1": hi[0].sample_index,
                "sample_2": lo[0].sample_index,
                "class_1": hi[0].outcome.outcome_class.value,
                "class_2": lo[0].outcome.outcome_class.value,
                "tests_passed_1": hi[0].tests_passed,
                "tests_passed_2": lo[0].tests_passed,
                "implicit_diff": hi[1] - lo[1],
                "rule_diff": hi[0].rule_reward - lo[0].rule_reward,
            })
        rs = np.array([g[1] for g in group])
        fs = np.array([g[2] for g in group])
        if len(group) >= 2 and np.ptp(rs) > 0 and np.ptp(fs) > 0:
            rho = spearmanr(rs, fs).statistic
            if math.isfinite(rho):
                correlations[task_id] = float(rho)
    if not pair_rows:
        raise InsufficientDataError("no task has two rejected responses passing different "
                                    "numbers of tests")
    aggregate = float(np.mean(list(correlations.values()))) if correlations else None
    return MarginReport(reward_rows, pair_rows, correlations, aggregate, beta)


def write_report(report, path) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else report
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def outcome_histogram(records) -> dict[str, int]:
    counts = {c.value: 0 for c in OutcomeClass}
    for r in records:
        counts[r.outcome.outcome_class.value] += 1
    return counts

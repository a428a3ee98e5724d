"""Seeded synthesis of coding tasks with public and hidden unit tests."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from ._seeding import derive_seed
from .minilang import Program, execute, parse_source, render

__all__ = [
    "FAMILIES",
    "UnitTest",
    "Task",
    "Corpus",
    "ground_truth_source",
    "make_task",
    "generate_corpus",
    "generate_pretraining_tasks",
    "render_prompt",
    "write_tasks",
    "read_tasks",
]

FAMILIES = ("Affine", "Quadratic", "AffineMod", "TriangularSum", "Composite")

COEFF_RANGE = (-4, 9)
MODULUS_RANGE = (2, 9)
PUBLIC_RANGE = (0, 9)
HIDDEN_RANGE = (10, 99)
N_PUBLIC = 3
N_HIDDEN = 5


@dataclass(frozen=True)
class UnitTest:
    input: int
    expected: int


@dataclass(frozen=True)
class Task:
    id: int
    family: str
    coeffs: tuple[int, ...]
    ground_truth: Program
    public_tests: tuple[UnitTest, ...]
    hidden_tests: tuple[UnitTest, ...]

    @property
    def key(self) -> tuple[str, tuple[int, ...]]:
        return (self.family, self.coeffs)

    @property
    def all_tests(self) -> tuple[UnitTest, ...]:
        return self.public_tests + self.hidden_tests

    @property
    def gt_text(self) -> str:
        return render(self.ground_truth)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "family": self.family,
            "coeffs": list(self.coeffs),
            "gt": self.gt_text,
            "public": [[t.input, t.expected] for t in self.public_tests],
            "hidden": [[t.input, t.expected] for t in self.hidden_tests],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Task":
        return cls(
            id=int(record["id"]),
            family=record["family"],
            coeffs=tuple(int(c) for c in record["coeffs"]),
            ground_truth=parse_source(record["gt"]),
            public_tests=tuple(UnitTest(int(i), int(o)) for i, o in record["public"]),
            hidden_tests=tuple(UnitTest(int(i), int(o)) for i, o in record["hidden"]),
        )


@dataclass(frozen=True)
class Corpus:
    train_tasks: tuple[Task, ...]
    eval_tasks: tuple[Task, ...]
    seed: int


def _factor(c: int) -> str:
    # Literals are single digits, so negative multipliers are spelled out.
    return str(c) if c >= 0 else f"( 0 - {-c} )"


def _offset(c: int) -> str:
    return f"+ {c}" if c >= 0 else f"- {-c}"


def ground_truth_source(family: str, coeffs: tuple[int, ...]) -> str:
    if family == "Affine":
        a, b = coeffs
        return f"return {_factor(a)} * n {_offset(b)}"
    if family == "Quadratic":
        a, b = coeffs
        return f"return {_factor(a)} * n * n {_offset(b)}"
    if family == "AffineMod":
        a, b, m = coeffs
        return f"return ( {_factor(a)} * n {_offset(b)} ) % {m}"
    if family == "TriangularSum":
        a, b = coeffs
        return f"a = n * ( n + 1 ) / 2 ; return {_factor(a)} * a {_offset(b)}"
    if family == "Composite":
        a, b = coeffs
        return f"a = n {_offset(a)} ; return a * ( n {_offset(b)} )"
    raise ValueError(f"unknown family {family!r}")


def _draw_coeffs(rng: random.Random, family: str) -> tuple[int, ...]:
    lo, hi = COEFF_RANGE
    coeffs = [rng.randint(lo, hi), rng.randint(lo, hi)]
    if family == "AffineMod":
        coeffs.append(rng.randint(*MODULUS_RANGE))
    elif family == "Composite":
        # (n + a)(n + b) is symmetric; keep one spelling per function.
        coeffs.sort()
    return tuple(coeffs)


@lru_cache(maxsize=None)
def _program(family: str, coeffs: tuple[int, ...]) -> Program:
    return parse_source(ground_truth_source(family, coeffs))


@lru_cache(maxsize=None)
def _is_degenerate(family: str, coeffs: tuple[int, ...]) -> bool:
    program = _program(family, coeffs)
    lo, hi = PUBLIC_RANGE[0], HIDDEN_RANGE[1]
    return len({execute(program, n) for n in range(lo, hi + 1)}) == 1


def _draw_inputs(rng: random.Random) -> tuple[list[int], list[int]]:
    # Public inputs always include 0 and 1 so that offsets and slopes are
    # readable from the prompt; the third probes the family's shape.
    public = [0, 1, rng.randint(2, PUBLIC_RANGE[1])]
    hidden = sorted(rng.sample(range(HIDDEN_RANGE[0], HIDDEN_RANGE[1] + 1), N_HIDDEN))
    return public, hidden


def make_task(task_id: int, family: str, coeffs: tuple[int, ...],
              public_inputs, hidden_inputs) -> Task:
    """Build a task, computing expected outputs with the interpreter."""
    program = _program(family, tuple(coeffs))
    public = tuple(UnitTest(i, execute(program, i)) for i in public_inputs)
    hidden = tuple(UnitTest(i, execute(program, i)) for i in hidden_inputs)
    return Task(task_id, family, tuple(coeffs), program, public, hidden)


def _draw_task(rng: random.Random, task_id: int, exclude: set) -> Task:
    while True:
        family = FAMILIES[rng.randrange(len(FAMILIES))]
        coeffs = _draw_coeffs(rng, family)
        if (family, coeffs) in exclude:
            continue
        if _is_degenerate(family, coeffs):
            continue
        public, hidden = _draw_inputs(rng)
        return make_task(task_id, family, coeffs, public, hidden)


def generate_corpus(seed: int, n_train: int, n_eval: int) -> Corpus:
    """Generate disjoint train/eval splits.

    Eval tasks are drawn first; train tasks never reuse an eval
    ``(family, coeffs)`` pair.  Ids run 0..n_train-1 for train and continue
    for eval.
    """
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    eval_rng = random.Random(derive_seed("corpus", seed, "eval"))
    eval_tasks = [_draw_task(eval_rng, n_train + i, set()) for i in range(n_eval)]
    held_out = {t.key for t in eval_tasks}
    train_rng = random.Random(derive_seed("corpus", seed, "train"))
    train_tasks = [_draw_task(train_rng, i, held_out) for i in range(n_train)]
    return Corpus(tuple(train_tasks), tuple(eval_tasks), seed)


def generate_pretraining_tasks(seed: int, n: int, exclude) -> list[Task]:
    """Tasks for supervised warm-up, avoiding every key in ``exclude``.

    These stand in for the broad data an instruction-tuned model has seen
    before alignment.  Ids are negative so they never collide with corpus
    ids.
    """
    exclude = {(t.key if isinstance(t, Task) else t) for t in exclude}
    rng = random.Random(derive_seed("pretrain", seed))
    return [_draw_task(rng, -(i + 1), exclude) for i in range(n)]


def render_prompt(task: Task) -> str:
    """``IN <i> OUT <o> ; ... =>`` over the public tests only."""
    body = " ; ".join(f"IN {t.input} OUT {t.expected}" for t in task.public_tests)
    return f"{body} =>"


def write_tasks(tasks, path) -> None:
    lines = [json.dumps(t.to_record(), separators=(",", ":")) for t in tasks]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="ascii")


def read_tasks(path) -> list[Task]:
    tasks = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed task record: {exc}") from exc
    return tasks

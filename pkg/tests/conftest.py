import pytest

from exdpo.model import init
from exdpo.taskgen import generate_corpus, generate_pretraining_tasks, render_prompt
from exdpo.train import TrainConfig, sft

from _shared import SMALL  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(5, 40, 20)


@pytest.fixture(scope="session")
def trained_small(small_corpus):
    """A briefly warmed-up small model; cheap but no longer uniform."""
    pool = generate_pretraining_tasks(9, 1500, [t.key for t in small_corpus.eval_tasks])
    examples = [(render_prompt(t), t.gt_text) for t in pool]
    params, _ = sft(init(SMALL), examples,
                    TrainConfig(epochs=1, learning_rate=3e-3, batch_size=32, seed=1))
    return params


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from .model import ParamVector
from .taskgen import Task, render_prompt


def check_tasks(X) -> list[Task]:
    tasks = list(X)
    if not tasks:
        raise ValueError("expected a nonempty sequence of tasks")
    bad = [type(t).__name__ for t in tasks if not isinstance(t, Task)]
    if bad:
        raise TypeError(f"expected Task objects, got {bad[0]}")
    return tasks


def check_prompts(X) -> list[str]:
    """Tasks are rendered; strings pass through as prompts."""
    items = list(X)
    if not items:
        raise ValueError("expected a nonempty sequence of tasks or prompts")
    prompts = []
    for item in items:
        if isinstance(item, Task):
            prompts.append(render_prompt(item))
        elif isinstance(item, str):
            prompts.append(item)
        else:
            raise TypeError(f"expected Task or str, got {type(item).__name__}")
    return prompts


def check_examples(X, y=None) -> list[tuple[str, str]]:
    """``(prompt, target)`` pairs from tasks alone or from prompts plus targets."""
    if y is None:
        return [(render_prompt(t), t.gt_text) for t in check_tasks(X)]
    prompts, targets = check_prompts(X), list(y)
    if len(prompts) != len(targets):
        raise ValueError(f"X has {len(prompts)} items but y has {len(targets)}")
    if not all(isinstance(t, str) for t in targets):
        raise TypeError("targets must be strings")
    return list(zip(prompts, targets))


def check_params(params) -> ParamVector:
    """Accept a ParamVector or anything fitted that exposes ``params_``."""
    params = getattr(params, "params_", params)
    if not isinstance(params, ParamVector):
        raise TypeError(f"expected ParamVector or fitted policy, got {type(params).__name__}")
    return params

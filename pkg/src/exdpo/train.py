"""Supervised warm-up, rejection-sampling fine-tuning and DPO.

All three optimise the flat parameter vector with mini-batches under a
linear-warmup cosine schedule.  Shuffling is seeded per epoch, so a fixed
config reproduces the same checkpoint bit for bit.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._seeding import derive_seed
from .model import ParamVector, sequence_logprobs
from .vocab import encode_prompt, encode_response

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "PRESETS",
    "lr_at",
    "sft",
    "rft",
    "dpo_loss",
    "dpo",
    "load_config",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    learning_rate: float = 5e-6
    schedule: str = "cosine"
    warmup_ratio: float = 0.05
    batch_size: int = 16
    beta: float = 0.1
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


PRESETS = {
    # Published alignment settings for 7B models.
    "paper-parity": TrainConfig(epochs=1, learning_rate=5e-6, warmup_ratio=0.05,
                                batch_size=16, beta=0.1),
    # Alignment runs on the toy model: ~100 pairs, so several passes.
    "desk": TrainConfig(epochs=3, learning_rate=3e-4, warmup_ratio=0.05,
                        batch_size=16, beta=0.1),
    # Supervised warm-up that produces the base/reference model.
    "desk-sft": TrainConfig(epochs=1, learning_rate=3e-3, warmup_ratio=0.05,
                            batch_size=32, beta=0.1),
}


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over ``floor(warmup_ratio * total)`` steps, then cosine to 0."""
    if not 0 <= step < total_steps:
        raise ValueError("step must be in [0, total_steps)")
    warmup = int(config.warmup_ratio * total_steps)
    if step < warmup:
        return config.learning_rate * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _batches(n_items: int, config: TrainConfig):
    for epoch in range(config.epochs):
        order = list(range(n_items))
        random.Random(derive_seed("shuffle", config.seed, epoch)).shuffle(order)
        for lo in range(0, n_items, config.batch_size):
            yield order[lo:lo + config.batch_size]


def _n_steps(n_items: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n_items / config.batch_size)


def _optimize(params: ParamVector, n_items: int, config: TrainConfig, batch_loss
              ) -> tuple[ParamVector, TrainReport]:
    flat = params.tensor().clone().requires_grad_(True)
    if config.optimizer == "adam":
        opt = torch.optim.Adam([flat], lr=0.0)
    else:
        opt = torch.optim.SGD([flat], lr=0.0)
    total = _n_steps(n_items, config)
    report = TrainReport()
    start = time.perf_counter()
    for step, idx in enumerate(_batches(n_items, config)):
        loss = batch_loss(flat, idx)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        for group in opt.param_groups:
            group["lr"] = lr_at(step, total, config)
        opt.step()
        report.losses.append(value)
    report.steps = total
    report.wall_time = time.perf_counter() - start
    values = flat.detach().numpy().copy()
    if not np.all(np.isfinite(values)):
        raise TrainingDiverged("non-finite parameters after training")
    return params.with_values(values), report


def _encode_examples(examples):
    return [(encode_prompt(p), encode_response(t)) for p, t in examples]


def sft(params: ParamVector, examples, config: TrainConfig) -> tuple[ParamVector, TrainReport]:
    """Minimise mean negative log-likelihood of targets given prompts.

    ``examples`` is a sequence of ``(prompt_text, target_text)``.
    """
    encoded = _encode_examples(examples)
    if not encoded:
        raise ValueError("sft needs at least one example")

    def batch_loss(flat, idx):
        return -sequence_logprobs(flat, params.config, [encoded[i] for i in idx]).mean()

    return _optimize(params, len(encoded), config, batch_loss)


def rft(params: ParamVector, pairs, config: TrainConfig) -> tuple[ParamVector, TrainReport]:
    """Supervised fine-tuning on the chosen side of preference pairs only."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("rft needs at least one pair")
    return sft(params, [(p.prompt, p.chosen) for p in pairs], config)


def _encode_pairs(pairs):
    return [(encode_prompt(p.prompt), encode_response(p.chosen), encode_response(p.rejected))
            for p in pairs]


def _ref_logprobs(ref: ParamVector, encoded) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        chosen = sequence_logprobs(ref.tensor(), ref.config, [(p, c) for p, c, _ in encoded])
        rejected = sequence_logprobs(ref.tensor(), ref.config, [(p, r) for p, _, r in encoded])
    return chosen, rejected


def _dpo_objective(flat, config, encoded, ref_chosen, ref_rejected, beta):
    chosen = sequence_logprobs(flat, config, [(p, c) for p, c, _ in encoded])
    rejected = sequence_logprobs(flat, config, [(p, r) for p, _, r in encoded])
    margin = beta * ((chosen - ref_chosen) - (rejected - ref_rejected))
    return -F.logsigmoid(margin).mean()


def dpo_loss(policy: ParamVector, ref: ParamVector, pairs, beta: float = 0.1
             ) -> tuple[float, np.ndarray]:
    """Mean DPO loss over ``pairs`` and its gradient w.r.t. the policy.

    The reference enters only through constants; no gradient reaches it.
    """
    encoded = _encode_pairs(pairs)
    if not encoded:
        raise ValueError("dpo_loss needs at least one pair")
    ref_chosen, ref_rejected = _ref_logprobs(ref, encoded)
    flat = policy.tensor().clone().requires_grad_(True)
    loss = _dpo_objective(flat, policy.config, encoded, ref_chosen, ref_rejected, beta)
    loss.backward()
    return float(loss.detach()), flat.grad.numpy().copy()


def dpo(policy: ParamVector, ref: ParamVector, pairs, config: TrainConfig
        ) -> tuple[ParamVector, TrainReport]:
    encoded = _encode_pairs(pairs)
    if not encoded:
        raise ValueError("dpo needs at least one pair")
    ref_chosen, ref_rejected = _ref_logprobs(ref, encoded)

    def batch_loss(flat, idx):
        batch = [encoded[i] for i in idx]
        return _dpo_objective(flat, policy.config, batch, ref_chosen[idx], ref_rejected[idx],
                              config.beta)

    return _optimize(policy, len(encoded), config, batch_loss)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read flat ``key = value`` lines; ``#`` starts a comment."""
    base = base or PRESETS["desk"]
    types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(types[key], value)
    return replace(base, **updates)


def _coerce(type_name, value: str):
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    return value


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)

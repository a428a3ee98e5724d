"""End-to-end protocols: base vs RFT vs DPO, and on- vs off-policy DPO."""

from __future__ import annotations

import hashlib
import logging
import statistics
import time
from dataclasses import dataclass, field, replace

from ._seeding import derive_seed
from .evaluation import EvalReport, MarginReport, evaluate, margin_report
from .model import ModelConfig, ParamVector, init
from .pairs import DEFAULT_K, DEFAULT_TEMPERATURE, build_pairs, collect_responses
from .taskgen import generate_corpus, generate_pretraining_tasks, render_prompt
from .train import PRESETS, TrainConfig, dpo, rft, sft

log = logging.getLogger(__name__)

__all__ = ["DeskSettings", "params_digest", "train_base", "run_seed", "run_seeds", "summarize"]


@dataclass(frozen=True)
class DeskSettings:
    n_train: int = 300
    n_eval: int = 100
    n_pretrain: int = 80_000
    k: int = DEFAULT_K
    temperature: float = DEFAULT_TEMPERATURE
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: TrainConfig = PRESETS["desk-sft"]
    align: TrainConfig = PRESETS["desk"]
    exclude_train_from_pretrain: bool = True


def params_digest(params: ParamVector) -> str:
    return hashlib.sha256(params.values.tobytes()).hexdigest()[:16]


def train_base(corpus, settings: DeskSettings, seed: int) -> ParamVector:
    """Supervised warm-up on tasks disjoint from the corpus splits."""
    exclude = [t.key for t in corpus.eval_tasks]
    if settings.exclude_train_from_pretrain:
        exclude += [t.key for t in corpus.train_tasks]
    pool = generate_pretraining_tasks(derive_seed("pool", seed), settings.n_pretrain, exclude)
    examples = [(render_prompt(t), t.gt_text) for t in pool]
    params = init(replace(settings.model, seed=derive_seed("init", seed) % 2**31))
    params, report = sft(params, examples, replace(settings.sft, seed=derive_seed("sft", seed)))
    log.info("sft seed=%s steps=%d final_loss=%.4f (%.0fs)", seed, report.steps,
             report.final_loss, report.wall_time)
    return params


@dataclass
class SeedResult:
    seed: int
    base: EvalReport
    rft: EvalReport
    dpo: EvalReport
    n_pairs: int
    margins: MarginReport | None = None
    off_policy: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def row(self) -> dict:
        row = {
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "base": self.base.pass1_all,
            "rft": self.rft.pass1_all,
            "dpo": self.dpo.pass1_all,
            "base_public": self.base.pass1_public,
            "rft_public": self.rft.pass1_public,
            "dpo_public": self.dpo.pass1_public,
        }
        if self.margins is not None:
            row["correlation"] = self.margins.correlation
        row.update(self.off_policy)
        return row


def _align(base, settings, corpus, seed, name):
    records = collect_responses(base, corpus.train_tasks, settings.k, settings.temperature,
                                derive_seed("collect", seed, name))
    pairs = build_pairs(records, derive_seed("pairs", seed, name), params_digest(base))
    return records, pairs


def run_seed(seed: int, settings: DeskSettings = DeskSettings(), *, margins: bool = True,
             off_policy: bool = False) -> SeedResult:
    """Run the full pipeline for one seed.

    With ``off_policy`` a second base model is trained from different seeds
    and each model is also DPO-trained on the other's pairs.
    """
    clock = {}
    t0 = time.perf_counter()
    corpus = generate_corpus(seed, settings.n_train, settings.n_eval)
    base = train_base(corpus, settings, derive_seed("model-a", seed))
    clock["sft"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    _, pairs = _align(base, settings, corpus, seed, "a")
    clock["collect"] = time.perf_counter() - t0
    if not pairs:
        raise RuntimeError(f"seed {seed}: no preference pairs")
    align = replace(settings.align, seed=derive_seed("align", seed))

    t0 = time.perf_counter()
    rft_params, _ = rft(base, pairs, align)
    dpo_params, _ = dpo(base, base, pairs, align)
    clock["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = SeedResult(seed, evaluate(base, corpus.eval_tasks),
                        evaluate(rft_params, corpus.eval_tasks),
                        evaluate(dpo_params, corpus.eval_tasks), len(pairs))
    if margins:
        held_out = collect_responses(base, corpus.eval_tasks, settings.k, settings.temperature,
                                     derive_seed("collect-eval", seed))
        result.margins = margin_report(dpo_params, base, held_out, settings.align.beta)
    clock["eval"] = time.perf_counter() - t0

    if off_policy:
        t0 = time.perf_counter()
        other = train_base(corpus, settings, derive_seed("model-b", seed))
        _, other_pairs = _align(other, settings, corpus, seed, "b")
        on_b, _ = dpo(other, other, other_pairs, align)
        off_a, _ = dpo(base, base, other_pairs, align)
        off_b, _ = dpo(other, other, pairs, align)
        result.off_policy = {
            "a_base": result.base.pass1_all,
            "a_on": result.dpo.pass1_all,
            "a_off": evaluate(off_a, corpus.eval_tasks).pass1_all,
            "b_base": evaluate(other, corpus.eval_tasks).pass1_all,
            "b_on": evaluate(on_b, corpus.eval_tasks).pass1_all,
            "b_off": evaluate(off_b, corpus.eval_tasks).pass1_all,
            "b_pairs": len(other_pairs),
        }
        clock["off_policy"] = time.perf_counter() - t0
    result.timings = clock
    log.info("seed=%s %s %s", seed, result.row(), {k: round(v) for k, v in clock.items()})
    return result


def run_seeds(seeds, settings: DeskSettings = DeskSettings(), **kwargs) -> list[SeedResult]:
    return [run_seed(s, settings, **kwargs) for s in seeds]


def summarize(results) -> dict:
    """Medians across seeds of every numeric column."""
    rows = [r.row() for r in results]
    keys = [k for k in rows[0] if k != "seed"]
    summary = {}
    for key in keys:
        values = [row[key] for row in rows if row.get(key) is not None]
        if values:
            summary[key] = statistics.median(values)
    return summary

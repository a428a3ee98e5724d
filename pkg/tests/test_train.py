import math
from dataclasses import replace

import numpy as np
import pytest

from exdpo.evaluation import evaluate, implicit_rewards
from exdpo.model import ModelConfig, ParamVector, init, layout, n_params
from exdpo.pairs import PairMeta, PreferencePair
from exdpo.taskgen import render_prompt
from exdpo.train import (
    PRESETS,
    TrainConfig,
    TrainingDiverged,
    dpo,
    dpo_loss,
    load_config,
    lr_at,
    parse_config_text,
    rft,
    sft,
)
from exdpo.vocab import EOS_ID, TOKEN_TO_ID

from _shared import SMALL

META = PairMeta(3, 0, "FailedTest", "gen", 0)


def _pair(task_id, prompt, chosen, rejected):
    return PreferencePair(task_id, prompt, chosen, rejected, META)


PAIRS = [
    _pair(0, "IN 0 OUT 3 ; IN 1 OUT 5 =>", "return 2 * n + 3", "return n + 3"),
    _pair(1, "IN 0 OUT 0 ; IN 2 OUT 4 =>", "return n * n", "return n +"),
    _pair(2, "IN 1 OUT 1 ; IN 3 OUT 6 =>", "a = n * ( n + 1 ) / 2 ; return a", "return n / 0"),
]


# -- schedule -------------------------------------------------------------------


def _schedule_oracle(step, total, lr, ratio):
    warm = math.floor(ratio * total)
    if step < warm:
        return lr * step / warm
    return lr * (1 + math.cos(math.pi * (step - warm) / (total - warm))) / 2


@pytest.mark.parametrize("total,ratio", [(100, 0.05), (57, 0.05), (19, 0.0), (200, 0.3), (1, 0.05)])
def test_lr_schedule(total, ratio):
    config = TrainConfig(learning_rate=2e-3, warmup_ratio=ratio)
    values = [lr_at(s, total, config) for s in range(total)]
    warm = math.floor(ratio * total)
    assert values[0] == (0.0 if warm else 2e-3)
    if warm < total:
        assert values[warm] == pytest.approx(2e-3, abs=1e-18)
    for s, v in enumerate(values):
        assert v == pytest.approx(_schedule_oracle(s, total, 2e-3, ratio), abs=1e-18)
    tail = values[warm:]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    if total > 1:
        increment = 2e-3 * (1 - math.cos(math.pi / (total - warm))) / 2
        assert values[-1] <= increment + 1e-18


def test_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_at(10, 10, TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(warmup_ratio=1.0), dict(warmup_ratio=-0.1),
                                    dict(beta=0.0), dict(batch_size=0), dict(schedule="linear")])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_parity_preset_values():
    p = PRESETS["paper-parity"]
    assert (p.epochs, p.learning_rate, p.schedule, p.warmup_ratio, p.batch_size, p.beta) == \
        (1, 5e-6, "cosine", 0.05, 16, 0.1)


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# alignment\nepochs = 2\nlearning_rate=3e-4  # faster\n\nbeta = 0.2\n")
    config = load_config(path)
    assert (config.epochs, config.learning_rate, config.beta) == (2, 3e-4, 0.2)
    assert config.batch_size == PRESETS["desk"].batch_size
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("momentum = 0.9")
    with pytest.raises(ValueError):
        parse_config_text("epochs 3")


# -- DPO loss ---------------------------------------------------------------------


def test_dpo_loss_is_ln2_at_reference(trained_small):
    loss, grad = dpo_loss(trained_small, trained_small, PAIRS, beta=0.1)
    assert abs(loss - math.log(2)) < 1e-12
    assert grad.shape == trained_small.values.shape


def _two_token_model(logit_n, logit_eos, config=ModelConfig(context_length=32, width=4,
                                                             depth=1, heads=1)):
    """All weights zero; head bias leaves only ``n`` and EOS with nonzero mass."""
    values = np.zeros(n_params(config))
    _, _, offset = next(e for e in layout(config) if e[0] == "head.b")
    bias = np.full(31, -1e4)
    bias[TOKEN_TO_ID["n"]] = logit_n
    bias[EOS_ID] = logit_eos
    values[offset:offset + 31] = bias
    return ParamVector(config, values)


def _two_token_logprob(logit_n, logit_eos, n_count):
    log_z = math.log(math.exp(logit_n) + math.exp(logit_eos))
    return n_count * (logit_n - log_z) + (logit_eos - log_z)


def test_dpo_loss_matches_two_token_oracle():
    policy, ref = _two_token_model(0.7, -0.4), _two_token_model(-0.2, 0.3)
    # responses of 1 and 3 ``n`` tokens (the EOS is implicit)
    pairs = [_pair(0, "IN 0 OUT 0 =>", "n", "n n n"), _pair(1, "IN 1 OUT 1 =>", "n n n", "n")]
    beta = 0.25
    terms = []
    for chosen, rejected in ((1, 3), (3, 1)):
        margin = beta * ((_two_token_logprob(0.7, -0.4, chosen) - _two_token_logprob(-0.2, 0.3, chosen))
                         - (_two_token_logprob(0.7, -0.4, rejected)
                            - _two_token_logprob(-0.2, 0.3, rejected)))
        terms.append(-math.log(1 / (1 + math.exp(-margin))))
    loss, _ = dpo_loss(policy, ref, pairs, beta)
    assert loss == pytest.approx(sum(terms) / len(terms), abs=1e-12)


def test_two_token_implicit_reward_diff():
    from exdpo.evaluation import implicit_reward_diff
    policy, ref = _two_token_model(1.1, 0.2), _two_token_model(0.0, 0.5)
    beta = 0.1
    expected = beta * ((_two_token_logprob(1.1, 0.2, 2) - _two_token_logprob(0.0, 0.5, 2))
                       - (_two_token_logprob(1.1, 0.2, 5) - _two_token_logprob(0.0, 0.5, 5)))
    got = implicit_reward_diff(policy, ref, "IN 0 OUT 0 =>", "n n", "n n n n n", beta)
    assert got == pytest.approx(expected, abs=1e-12)


def test_dpo_loss_positive(trained_small):
    other = trained_small.with_values(trained_small.values * 1.01)
    loss, _ = dpo_loss(other, trained_small, PAIRS)
    assert loss > 0


def test_single_step_decreases_pair_loss(trained_small):
    pair = PAIRS[:1]
    before, grad = dpo_loss(trained_small, trained_small, pair)
    stepped = trained_small.with_values(trained_small.values - 1e-3 * grad)
    after, _ = dpo_loss(stepped, trained_small, pair)
    assert after < before


def test_dpo_training(trained_small):
    ref_before = trained_small.values.copy()
    config = TrainConfig(epochs=4, learning_rate=3e-3, batch_size=2, seed=5)
    policy, report = dpo(trained_small, trained_small, PAIRS, config)
    assert np.array_equal(trained_small.values, ref_before)
    assert report.steps == 8 and len(report.losses) == 8
    assert all(math.isfinite(x) for x in report.losses)
    chosen = implicit_rewards(policy, trained_small, [(p.prompt, p.chosen) for p in PAIRS])
    rejected = implicit_rewards(policy, trained_small, [(p.prompt, p.rejected) for p in PAIRS])
    assert np.mean(chosen - rejected) > 0
    again, _ = dpo(trained_small, trained_small, PAIRS, config)
    assert np.array_equal(policy.values, again.values)


# -- supervised ---------------------------------------------------------------------


def test_sft_descends_and_memorises(small_corpus):
    tasks = small_corpus.train_tasks[:16]
    examples = [(render_prompt(t), t.gt_text) for t in tasks]
    start = init(SMALL)
    config = TrainConfig(epochs=40, learning_rate=1e-2, batch_size=16, seed=0)
    trained, report = sft(start, examples, config)
    assert report.losses[-1] < report.losses[0]
    assert evaluate(trained, tasks).pass1_all > evaluate(start, tasks).pass1_all
    again, _ = sft(start, examples, config)
    assert np.array_equal(trained.values, again.values)


def test_sft_rejects_empty():
    with pytest.raises(ValueError):
        sft(init(SMALL), [], TrainConfig())


def test_divergence_guard():
    config = TrainConfig(epochs=2, learning_rate=1e300, batch_size=1, optimizer="sgd",
                         warmup_ratio=0.0)
    with pytest.raises(TrainingDiverged):
        sft(init(SMALL), [("IN 0 OUT 1 =>", "return 1")] * 3, config)


def test_rft_ignores_rejected(trained_small):
    config = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=2, seed=1)
    a, _ = rft(trained_small, PAIRS, config)
    rotated = [replace(p, rejected=PAIRS[(i + 1) % 3].rejected) for i, p in enumerate(PAIRS)]
    b, _ = rft(trained_small, rotated, config)
    assert np.array_equal(a.values, b.values)


def test_rft_equals_sft_on_chosen(trained_small):
    config = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=2, seed=1)
    a, _ = rft(trained_small, PAIRS, config)
    b, _ = sft(trained_small, [(p.prompt, p.chosen) for p in PAIRS], config)
    assert np.array_equal(a.values, b.values)

import math

import numpy as np
import pytest

from exdpo.model import (
    Checkpoint,
    CorruptCheckpointError,
    ModelConfig,
    ParamVector,
    SequenceTooLongError,
    VersionMismatchError,
    VocabMismatchError,
    dumps,
    grad_response_logprob,
    greedy_decode,
    greedy_decode_batch,
    init,
    layout,
    load,
    n_params,
    next_token_probs,
    response_logprob,
    sample,
    sample_batch,
    save,
)
from exdpo.taskgen import render_prompt
from exdpo.vocab import BOS_ID, EOS_ID, PAD_ID, VOCAB_SIZE, encode_prompt, encode_response

from _shared import SMALL

PROMPT = encode_prompt("IN 0 OUT 3 ; IN 1 OUT 5 ; IN 4 OUT 11 =>")
RESPONSE = encode_response("return 2 * n + 3")


def test_init_deterministic_and_bounded():
    a, b = init(SMALL), init(SMALL)
    assert np.array_equal(a.values, b.values)
    assert np.all(np.isfinite(a.values)) and np.all(np.abs(a.values) < 1)
    assert len(a.values) == n_params(SMALL)
    other = init(ModelConfig(context_length=64, width=32, depth=1, heads=2, seed=4))
    assert not np.array_equal(a.values, other.values)


def test_biases_start_at_zero():
    params = init(SMALL)
    for name, shape, offset in layout(SMALL):
        if name.endswith(".b"):
            assert not params.values[offset:offset + math.prod(shape)].any()


def test_uniform_model_logprob():
    zeros = ParamVector(SMALL, np.zeros(n_params(SMALL)))
    expected = len(RESPONSE) * math.log(1 / VOCAB_SIZE)
    assert response_logprob(zeros, PROMPT, RESPONSE) == pytest.approx(expected, abs=1e-12)


def test_pad_after_eos_is_ignored(trained_small):
    plain = response_logprob(trained_small, PROMPT, RESPONSE)
    padded = response_logprob(trained_small, PROMPT, RESPONSE + [PAD_ID] * 5)
    assert plain == padded


def test_logprob_matches_stepwise_product(trained_small):
    total = 0.0
    for t, token in enumerate(RESPONSE):
        probs = next_token_probs(trained_small, PROMPT, RESPONSE[:t], mask_specials=False)
        total += math.log(probs[token])
    assert response_logprob(trained_small, PROMPT, RESPONSE) == pytest.approx(total, abs=1e-10)


def test_logprob_finite_and_nonpositive(trained_small):
    weird = encode_response("IN IN ( ( ( q")
    value = response_logprob(trained_small, PROMPT, weird)
    assert math.isfinite(value) and value <= 0


def test_distributions_normalised(trained_small):
    for t in range(len(RESPONSE)):
        probs = next_token_probs(trained_small, PROMPT, RESPONSE[:t], mask_specials=False)
        assert abs(probs.sum() - 1.0) < 1e-12
        masked = next_token_probs(trained_small, PROMPT, RESPONSE[:t], temperature=0.7)
        assert abs(masked.sum() - 1.0) < 1e-12
        assert masked[PAD_ID] == masked[BOS_ID] == 0.0


def test_sequence_too_long():
    params = init(SMALL)
    with pytest.raises(SequenceTooLongError):
        response_logprob(params, PROMPT * 5, RESPONSE)


def test_gradient_shape_and_unused_positions(trained_small):
    grad = grad_response_logprob(trained_small, PROMPT, RESPONSE)
    assert grad.shape == trained_small.values.shape
    name, shape, offset = next(e for e in layout(SMALL) if e[0] == "pos_emb")
    used = len(PROMPT) + len(RESPONSE)
    block = grad[offset:offset + math.prod(shape)].reshape(shape)
    assert not block[used:].any()
    assert block[:used].any()


def test_sample_deterministic(trained_small):
    a = sample(trained_small, PROMPT, temperature=0.9, seed=17)
    b = sample(trained_small, PROMPT, temperature=0.9, seed=17)
    assert a == b and a[-1] == EOS_ID


def test_sample_respects_max_len():
    params = init(SMALL)
    out = sample(params, PROMPT, temperature=5.0, seed=0, max_len=4)
    assert len(out) <= 4 and out[-1] == EOS_ID


def test_near_zero_temperature_matches_greedy(trained_small, small_corpus):
    prompts = [encode_prompt(render_prompt(t)) for t in small_corpus.train_tasks]
    prompts += [encode_prompt(render_prompt(t)) for t in small_corpus.eval_tasks]
    rng = np.random.default_rng(0)
    for _ in range(60):
        prompts.append(encode_prompt(f"IN 0 OUT {rng.integers(-9, 60)} ; IN 1 OUT "
                                     f"{rng.integers(-9, 60)} ; IN 5 OUT {rng.integers(-9, 99)} =>"))
    assert len(prompts) == 120
    for i, prompt in enumerate(prompts[:100]):
        assert sample(trained_small, prompt, temperature=1e-6, seed=i) == \
            greedy_decode(trained_small, prompt)


def test_greedy_deterministic_and_clean(trained_small, small_corpus):
    prompts = [encode_prompt(render_prompt(t)) for t in small_corpus.eval_tasks]
    first = greedy_decode_batch(trained_small, prompts)
    second = greedy_decode_batch(trained_small, prompts)
    assert first == second
    for out in first:
        assert PAD_ID not in out and BOS_ID not in out
        assert out[-1] == EOS_ID


def test_batched_greedy_matches_single(trained_small, small_corpus):
    prompts = [encode_prompt(render_prompt(t)) for t in small_corpus.eval_tasks]
    assert greedy_decode_batch(trained_small, prompts) == \
        [greedy_decode(trained_small, p) for p in prompts]


def test_sampling_frequencies_match_distribution():
    params = init(SMALL)
    probs = next_token_probs(params, PROMPT, temperature=1.0)
    draws = 10_000
    firsts = [s[0] for s in sample_batch(params, PROMPT, range(draws), temperature=1.0,
                                        max_len=2)]
    counts = np.bincount(firsts, minlength=VOCAB_SIZE)
    sigma = np.sqrt(draws * probs * (1 - probs))
    assert np.all(np.abs(counts - draws * probs) <= 3 * sigma + 1e-9)


def test_checkpoint_round_trip(tmp_path, trained_small):
    ckpt = Checkpoint(trained_small, role="reference")
    path = tmp_path / "m.ckpt"
    save(ckpt, path)
    loaded = load(path)
    assert np.array_equal(loaded.params.values, trained_small.values)
    assert loaded.config == SMALL and loaded.role == "reference"
    save(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert path.read_bytes().startswith(b"EXDPO1")


def test_checkpoint_errors(tmp_path):
    ckpt = Checkpoint(init(SMALL))
    data = dumps(ckpt)
    path = tmp_path / "m.ckpt"
    path.write_bytes(data)
    with pytest.raises(VocabMismatchError):
        load(path, expected_vocab_hash="0" * 16)
    path.write_bytes(data[:-8])
    with pytest.raises(CorruptCheckpointError):
        load(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpointError):
        load(path)
    path.write_bytes(b"EXDPO2" + data[6:])
    with pytest.raises(VersionMismatchError):
        load(path)
    path.write_bytes(data.replace(b"format_version=1", b"format_version=7"))
    with pytest.raises(VersionMismatchError):
        load(path)

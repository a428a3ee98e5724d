import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from exdpo import CodePolicy, DPOPolicy, RFTPolicy
from exdpo.pairs import PairMeta, PreferencePair
from exdpo.taskgen import generate_pretraining_tasks, render_prompt

SMALL = dict(context_length=64, width=32, depth=1, heads=2)


@pytest.fixture(scope="module")
def base(small_corpus):
    pool = generate_pretraining_tasks(2, 6000, [t.key for t in small_corpus.eval_tasks])
    return CodePolicy(**SMALL, learning_rate=1e-2, random_state=1).fit(pool)


def test_params_round_trip():
    est = CodePolicy(width=16, random_state=3)
    assert est.get_params()["width"] == 16
    assert clone(est).get_params() == est.get_params()
    est.set_params(depth=3)
    assert est.depth == 3


def test_unfitted_raises(small_corpus):
    with pytest.raises(NotFittedError):
        CodePolicy().predict(small_corpus.eval_tasks)


def test_input_validation(small_corpus):
    with pytest.raises(ValueError):
        CodePolicy(**SMALL).fit([])
    with pytest.raises(TypeError):
        CodePolicy(**SMALL).fit([1, 2])
    with pytest.raises(ValueError):
        CodePolicy(**SMALL).fit(["IN 0 OUT 1 =>"], ["return 1", "return 2"])
    with pytest.raises(TypeError):
        DPOPolicy(reference="nope").fit(small_corpus.train_tasks)


def test_fit_predict_score(base, small_corpus):
    texts = base.predict(small_corpus.eval_tasks)
    assert len(texts) == len(small_corpus.eval_tasks)
    assert base.predict([render_prompt(t) for t in small_corpus.eval_tasks]) == texts
    assert 0.0 <= base.score(small_corpus.eval_tasks) <= 1.0


def test_prompt_target_fit():
    est = CodePolicy(**SMALL, epochs=2, batch_size=2).fit(["IN 0 OUT 1 =>", "IN 1 OUT 2 =>"],
                                                          ["return 1", "return 2"])
    assert est.report_.steps == 2


@pytest.mark.parametrize("cls", [RFTPolicy, DPOPolicy])
def test_aligned_on_policy(cls, base, small_corpus):
    est = cls(reference=base, learning_rate=1e-3, epochs=1, random_state=0)
    est.fit(small_corpus.train_tasks)
    assert est.pairs_ and len(est.pairs_) <= len(small_corpus.train_tasks)
    assert not np.array_equal(est.params_.values, base.params_.values)
    assert clone(est).get_params()["learning_rate"] == 1e-3


def test_aligned_explicit_pairs(base):
    pairs = [PreferencePair(0, "IN 0 OUT 3 ; IN 1 OUT 5 =>", "return 2 * n + 3", "return n",
                            PairMeta(3, 0, "FailedTest", "elsewhere", 0))]
    est = DPOPolicy(reference=base.params_, epochs=1).fit(None, pairs=pairs)
    assert est.pairs_ == pairs and not hasattr(est, "records_")

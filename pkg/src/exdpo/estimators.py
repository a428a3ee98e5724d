"""scikit-learn style wrappers around the training and evaluation functions.

``CodePolicy`` is the supervised warm-up; ``RFTPolicy`` and ``DPOPolicy``
start from a reference policy, label its own samples by execution and
fine-tune on the resulting pairs.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_examples, check_params, check_prompts, check_tasks
from .evaluation import evaluate
from .model import ModelConfig, greedy_decode_batch, init
from .pairs import DEFAULT_K, DEFAULT_TEMPERATURE, build_pairs, collect_responses
from .experiments import params_digest
from .train import TrainConfig, dpo, rft, sft
from .vocab import decode, encode_prompt

__all__ = ["CodePolicy", "RFTPolicy", "DPOPolicy"]


class _PolicyMixin:
    def predict(self, X) -> list[str]:
        """Greedy program text for each task or prompt."""
        check_is_fitted(self, "params_")
        prompts = [encode_prompt(p) for p in check_prompts(X)]
        return [decode(ids) for ids in greedy_decode_batch(self.params_, prompts)]

    def score(self, X, y=None) -> float:
        """Greedy pass@1 on all tests of the given tasks."""
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_tasks(X)).pass1_all


class CodePolicy(_PolicyMixin, BaseEstimator):
    """Transformer policy trained by maximum likelihood.

    ``fit(tasks)`` trains on each task's reference program;
    ``fit(prompts, targets)`` takes the pairs explicitly.
    """

    def __init__(self, context_length=128, width=64, depth=2, heads=4, learning_rate=3e-3,
                 epochs=1, batch_size=32, warmup_ratio=0.05, random_state=0):
        self.context_length = context_length
        self.width = width
        self.depth = depth
        self.heads = heads
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_ratio = warmup_ratio
        self.random_state = random_state

    def fit(self, X, y=None):
        examples = check_examples(X, y)
        config = ModelConfig(self.context_length, self.width, self.depth, self.heads,
                             self.random_state)
        train_config = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                                   warmup_ratio=self.warmup_ratio, batch_size=self.batch_size,
                                   seed=self.random_state)
        self.params_, self.report_ = sft(init(config), examples, train_config)
        return self


class _AlignedPolicy(_PolicyMixin, BaseEstimator):
    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           warmup_ratio=self.warmup_ratio, batch_size=self.batch_size,
                           beta=getattr(self, "beta", 0.1), seed=self.random_state)

    def fit(self, X, y=None, pairs=None):
        """Fine-tune the reference on preference pairs for tasks ``X``.

        Without ``pairs`` the reference samples ``k`` responses per task and
        the pairs are built from their execution outcomes (on-policy).
        """
        reference = check_params(self.reference)
        if pairs is None:
            self.records_ = collect_responses(reference, check_tasks(X), self.k, self.temperature,
                                              self.random_state)
            pairs = build_pairs(self.records_, self.random_state, params_digest(reference))
        self.pairs_ = list(pairs)
        if not self.pairs_:
            raise ValueError("no task produced both a passing and a failing response")
        self.params_, self.report_ = self._train(reference, self.pairs_, self._train_config())
        return self


class RFTPolicy(_AlignedPolicy):
    """Supervised fine-tuning on the chosen response of each pair."""

    def __init__(self, reference=None, learning_rate=3e-4, epochs=3, batch_size=16,
                 warmup_ratio=0.05, k=DEFAULT_K, temperature=DEFAULT_TEMPERATURE, random_state=0):
        self.reference = reference
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_ratio = warmup_ratio
        self.k = k
        self.temperature = temperature
        self.random_state = random_state

    @staticmethod
    def _train(reference, pairs, config):
        return rft(reference, pairs, config)


class DPOPolicy(_AlignedPolicy):
    """Direct preference optimisation with the reference as the anchor."""

    def __init__(self, reference=None, beta=0.1, learning_rate=3e-4, epochs=3, batch_size=16,
                 warmup_ratio=0.05, k=DEFAULT_K, temperature=DEFAULT_TEMPERATURE, random_state=0):
        self.reference = reference
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_ratio = warmup_ratio
        self.k = k
        self.temperature = temperature
        self.random_state = random_state

    @staticmethod
    def _train(reference, pairs, config):
        return dpo(reference, reference, pairs, config)

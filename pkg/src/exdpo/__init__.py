"""Execution-feedback preference optimisation on a synthetic mini-language."""

__version__ = "0.1.0"

from .estimators import CodePolicy, DPOPolicy, RFTPolicy
from .evaluation import EvalReport, MarginReport, evaluate, margin_report, pass_at_1
from .feedback import OutcomeClass, run_against_tests, rule_reward
from .model import Checkpoint, ModelConfig, ParamVector, init
from .pairs import PreferencePair, build_pairs, collect_responses
from .taskgen import Task, generate_corpus
from .train import PRESETS, TrainConfig, dpo, rft, sft

__all__ = [
    "__version__",
    "CodePolicy",
    "DPOPolicy",
    "RFTPolicy",
    "EvalReport",
    "MarginReport",
    "evaluate",
    "margin_report",
    "pass_at_1",
    "OutcomeClass",
    "run_against_tests",
    "rule_reward",
    "Checkpoint",
    "ModelConfig",
    "ParamVector",
    "init",
    "PreferencePair",
    "build_pairs",
    "collect_responses",
    "Task",
    "generate_corpus",
    "PRESETS",
    "TrainConfig",
    "dpo",
    "rft",
    "sft",
]

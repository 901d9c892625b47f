"""Sequential score testing for heterogeneous treatment effects in GLMs."""
from .glm import Dataset, FamilyKind, GlmFamily, Observation
from .penalties import PenaltyConfig, PenaltyKind
from .score_test import TestResult, run_single_post
from .sequential import Batch, ExperimentState, current_p_value, ingest_batch, new_experiment

__all__ = [
    "Dataset",
    "FamilyKind",
    "GlmFamily",
    "Observation",
    "PenaltyConfig",
    "PenaltyKind",
    "TestResult",
    "run_single_post",
    "Batch",
    "ExperimentState",
    "current_p_value",
    "ingest_batch",
    "new_experiment",
]

__version__ = "0.1.0"

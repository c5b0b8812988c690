"""Distribution-free risk control for black-box predictive distributions."""

from .core import (AlphaOutOfRange, DimensionMismatch, EmptyInput, Example, MultiLabelExample, NegativeEntry,
                   PredictionSet, ProbVector, RandomnessContract, RiskguardError, SizeMismatch, SplitPlan,
                   SumOutOfTolerance, make_prob_vector, split_dataset, stream)

__version__ = "0.1.0"

__all__ = [
    "AlphaOutOfRange", "DimensionMismatch", "EmptyInput", "Example", "MultiLabelExample", "NegativeEntry",
    "PredictionSet", "ProbVector", "RandomnessContract", "RiskguardError", "SizeMismatch", "SplitPlan",
    "SumOutOfTolerance", "make_prob_vector", "split_dataset", "stream",
]

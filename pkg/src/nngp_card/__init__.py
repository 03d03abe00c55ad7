"""Uncertainty-aware SQL cardinality estimation via exact GP regression with
an infinite-width network kernel, plus the full supporting pipeline."""

__version__ = "0.1.0"

from .gp import CardinalityEstimator, Prediction, fit, predict
from .kernel import KernelConfig
from .queries import InFilter, JoinCondition, Query, RangeFilter
from .relstore import Relation, SchemaCatalog, ingest_csv, register_join_pair, synth_relation

__all__ = [
    "CardinalityEstimator",
    "InFilter",
    "JoinCondition",
    "KernelConfig",
    "Prediction",
    "Query",
    "RangeFilter",
    "Relation",
    "SchemaCatalog",
    "fit",
    "ingest_csv",
    "predict",
    "register_join_pair",
    "synth_relation",
]

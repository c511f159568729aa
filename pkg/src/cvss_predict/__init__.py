"""Predict CVSS v3.1 vectors for CVE descriptions with LLMs, embeddings, or both."""
from .classifier import CvssEmbeddingClassifier, ModelBundle, SoftmaxRegression
from .cvss import (COMPONENTS, LABELS, CvssVector, MalformedVector, ScoreBreakdown, base_score,
                   enumerate_all_vectors, parse_vector, roundup, serialize_vector)
from .embeddings import EmbeddingClient, RecordFeaturizer
from .evaluation import EvalReport, component_accuracy, evaluate, mean_accuracy, regression_metrics
from .hybrid import DEFAULT_ROUTING, ComponentPrediction, PredictedVector, route, score_prediction
from .llm import Abstain, ChatClient, VanillaPredictor, normalize_score_response, \
    normalize_vector_response, strip_reasoning

__version__ = "0.1.0"

__all__ = [
    "COMPONENTS", "LABELS", "CvssVector", "MalformedVector", "ScoreBreakdown", "base_score",
    "enumerate_all_vectors", "parse_vector", "roundup", "serialize_vector",
    "SoftmaxRegression", "CvssEmbeddingClassifier", "ModelBundle",
    "EmbeddingClient", "RecordFeaturizer",
    "EvalReport", "component_accuracy", "evaluate", "mean_accuracy", "regression_metrics",
    "DEFAULT_ROUTING", "ComponentPrediction", "PredictedVector", "route", "score_prediction",
    "Abstain", "ChatClient", "VanillaPredictor", "normalize_score_response",
    "normalize_vector_response", "strip_reasoning",
]

"""Evaluation harness for chain-of-thought implicit sentiment analysis."""

from .backend import (
    BackendConfig,
    CompletionRequest,
    CompletionResponse,
    ResponseCache,
    cached_complete,
    complete,
    scripted_mock,
)
from .chains import ChainKind, ChainTrace, PromptTemplate, render, run_direct, run_saot, run_thor
from .corpus import DatasetName, DatasetSummary, Polarity, SentimentInstance, summarize
from .evaluation import PredictionRecord, average_improvement, evaluate, improvement_delta, slice_metrics
from .extraction import ExtractionPolicy, extract_polarity

__version__ = "0.1.0"

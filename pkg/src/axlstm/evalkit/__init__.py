"""Downstream evaluation: frozen features, MLP probes, and aggregated scores."""

from .features import (CHUNK_SECONDS, FeatureVector, FrozenEncoder, chunk_embeddings, extract_dataset,
                       extract_features, load_features, save_features, split_chunks)
from .probe import (ProbeConfig, ProbeError, ProbeResult, Split, TaskResult, confidence95, evaluate_task,
                    random_split, train_probe)
from .scores import (DegenerateTaskError, IncompleteTableError, ScoreTable, ScoreTableError, TaskSpec,
                     aggregate_score, all_scores, load_task_manifest, read_labels, read_results, write_results)

__all__ = [
    "CHUNK_SECONDS", "FeatureVector", "FrozenEncoder", "chunk_embeddings", "extract_dataset", "extract_features",
    "load_features", "save_features", "split_chunks",
    "ProbeConfig", "ProbeError", "ProbeResult", "Split", "TaskResult", "confidence95", "evaluate_task",
    "random_split", "train_probe",
    "DegenerateTaskError", "IncompleteTableError", "ScoreTable", "ScoreTableError", "TaskSpec",
    "aggregate_score", "all_scores", "load_task_manifest", "read_labels", "read_results", "write_results",
]

"""Metrics, experiment orchestration, reporting and the command-line interface."""
from .metrics import balanced_accuracy, balanced_accuracy_score, confusion_matrix, mean_ci95

__all__ = ["balanced_accuracy", "balanced_accuracy_score", "confusion_matrix", "mean_ci95"]

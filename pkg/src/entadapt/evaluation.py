"""Prediction evaluation: error rates, entropy histograms, per-example shifts, CSV emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import Network, predict_probs

__all__ = [
    "EvalReport",
    "ExampleShift",
    "evaluate",
    "prediction_entropy",
    "write_curves_csv",
    "write_examples_csv",
    "write_histogram_csv",
    "write_log_csv",
    "write_summary_csv",
]

HISTOGRAM_BINS = 30


def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of each probability row."""
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.maximum(p, 1e-12))).sum(axis=1)


@dataclass
class ExampleShift:
    index: int
    label: int
    probs_before: np.ndarray
    probs_after: np.ndarray


@dataclass
class EvalReport:
    n: int
    num_classes: int
    error_rate: float  # percent
    mean_entropy: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    reference_error_rate: float
    reference_mean_entropy: float
    reference_histogram_counts: np.ndarray
    examples: list[ExampleShift] = field(default_factory=list)
    curves: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, entropy, error%


def _model_probs(model, images: np.ndarray) -> np.ndarray:
    if isinstance(model, Network):
        return predict_probs(model, images)
    if hasattr(model, "predict_proba"):
        return model.predict_proba(images)
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def _entropy_histogram(entropies: np.ndarray, num_classes: int):
    top = math.log(num_classes)
    clipped = np.clip(entropies, 0.0, top)
    return np.histogram(clipped, bins=HISTOGRAM_BINS, range=(0.0, top))


def evaluate(model, dataset, reference_probs: np.ndarray | None = None, num_examples: int = 8) -> EvalReport:
    """Score a model (or fitted adapter) on a labelled dataset.

    `reference_probs` are the before-adaptation predictions; when omitted they
    come from the adapter's frozen network, or equal the model's own
    predictions for a plain network.
    """
    if dataset.labels is None:
        raise ValueError("evaluation needs a labelled dataset")
    labels = dataset.labels
    probs = _model_probs(model, dataset.images)
    if reference_probs is None:
        if isinstance(model, Network):
            reference_probs = probs
        else:
            reference_probs = predict_probs(model.network, dataset.images)
    num_classes = probs.shape[1]

    predictions = probs.argmax(axis=1)  # ties resolve to the lowest class index
    error = 100.0 * float((predictions != labels).mean()) if len(dataset) else 0.0
    entropies = prediction_entropy(probs)
    ref_entropies = prediction_entropy(reference_probs)
    counts, edges = _entropy_histogram(entropies, num_classes)
    ref_counts, _ = _entropy_histogram(ref_entropies, num_classes)
    ref_error = (
        100.0 * float((reference_probs.argmax(axis=1) != labels).mean()) if len(dataset) else 0.0
    )

    drop = ref_entropies - entropies
    order = np.argsort(-drop, kind="stable")[: min(num_examples, len(dataset))]
    examples = [
        ExampleShift(
            index=int(i),
            label=int(labels[i]),
            probs_before=reference_probs[i].copy(),
            probs_after=probs[i].copy(),
        )
        for i in order
    ]
    curves = []
    log = getattr(model, "log_", None)
    if log is not None:
        curves = [(e.epoch, e.mean_entropy, e.error_rate) for e in log.epochs]

    return EvalReport(
        n=len(dataset),
        num_classes=num_classes,
        error_rate=error,
        mean_entropy=float(entropies.mean()) if len(dataset) else 0.0,
        histogram_counts=counts,
        histogram_edges=edges,
        reference_error_rate=ref_error,
        reference_mean_entropy=float(ref_entropies.mean()) if len(dataset) else 0.0,
        reference_histogram_counts=ref_counts,
        examples=examples,
        curves=curves,
    )


# ---------------------------------------------------------------------------
# CSV emission (deterministic bytes: fixed float format, no timestamps)
# ---------------------------------------------------------------------------


def _open_csv(path, meta: dict | None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = path.open("w", newline="")
    for key in sorted(meta or {}):
        handle.write(f"# {key}={meta[key]}\n")
    return handle


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_summary_csv(report: EvalReport, path, meta: dict | None = None) -> None:
    with _open_csv(path, meta) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["n", report.n])
        writer.writerow(["num_classes", report.num_classes])
        writer.writerow(["error_rate", _fmt(report.error_rate)])
        writer.writerow(["mean_entropy", _fmt(report.mean_entropy)])
        writer.writerow(["reference_error_rate", _fmt(report.reference_error_rate)])
        writer.writerow(["reference_mean_entropy", _fmt(report.reference_mean_entropy)])


def write_histogram_csv(report: EvalReport, path, meta: dict | None = None) -> None:
    with _open_csv(path, meta) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["bin", "lower", "upper", "count_before", "count_after"])
        for i in range(len(report.histogram_counts)):
            writer.writerow(
                [
                    i,
                    _fmt(report.histogram_edges[i]),
                    _fmt(report.histogram_edges[i + 1]),
                    int(report.reference_histogram_counts[i]),
                    int(report.histogram_counts[i]),
                ]
            )


def write_examples_csv(report: EvalReport, path, meta: dict | None = None) -> None:
    with _open_csv(path, meta) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["example", "label", "class", "prob_before", "prob_after"])
        for ex in report.examples:
            for cls in range(report.num_classes):
                writer.writerow(
                    [ex.index, ex.label, cls, _fmt(ex.probs_before[cls]), _fmt(ex.probs_after[cls])]
                )


def write_curves_csv(curves, path, meta: dict | None = None) -> None:
    with _open_csv(path, meta) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "mean_entropy", "error_rate"])
        for epoch, entropy, error in curves:
            writer.writerow([epoch, _fmt(entropy), "" if error is None else _fmt(error)])


def write_log_csv(log, path, meta: dict | None = None) -> None:
    with _open_csv(path, meta) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "epoch", "lr", "batch_entropy"])
        for rec in log.steps:
            writer.writerow([rec.step, rec.epoch, _fmt(rec.lr), _fmt(rec.batch_entropy)])

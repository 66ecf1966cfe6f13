"""Full-image attribution metrics: MCA, cross-scale correlations, trends.

Per-class accuracy vectors are the common currency: one vector per scale
over the evaluated split, from which the Pearson correlation matrix between
scales and the per-class Increasing/Decreasing/Invariant trend labels are
derived.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, apply_channel_means
from .network import ModelState, forward
from .util import worker_count

TREND_LABELS = ("Increasing", "Decreasing", "Invariant")
DEFAULT_TREND_EPSILON = 0.01


class EvalError(Exception):
    """Undefined metric or malformed report."""


def predict_probs(model: ModelState, pixels: np.ndarray, means) -> np.ndarray:
    """Eval-mode class probabilities (1, K) for one (3, h, w) image."""
    x = apply_channel_means(pixels[None].astype(np.float32, copy=False), means)
    _, probs, _ = forward(model, x, mode="eval")
    return probs


def aggregate_predictions(y_true: np.ndarray, y_pred: np.ndarray,
                          num_classes: int):
    """Confusion counts -> (per_class_accuracy, mca, confusion).

    MCA is the unweighted mean of per-class accuracies, so it ignores class
    imbalance. A class with zero records has undefined accuracy and raises.
    """
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        confusion[int(t), int(p)] += 1
    totals = confusion.sum(axis=1)
    empty = np.nonzero(totals == 0)[0]
    if empty.size:
        raise EvalError(
            f"classes {empty.tolist()} have zero records; accuracy undefined")
    per_class = np.diag(confusion) / totals
    return per_class, float(per_class.mean()), confusion


@dataclass
class ScaleResult:
    per_class_accuracy: np.ndarray  # (K,)
    mca: float
    confusion: np.ndarray  # (K, K), rows true class, columns prediction


def evaluate_scale(model: ModelState, manifest: DatasetManifest, scale: int,
                   split: str = "test") -> ScaleResult:
    """Argmax of the full-image prediction per record, aggregated per class.

    Argmax ties break toward the lowest class index. Inference fans out to
    worker threads (capped by FCNA_THREADS) and is reduced in record order,
    so the result does not depend on scheduling.
    """
    records = manifest.split_records(split)
    if not records:
        raise EvalError(f"split {split!r} is empty")

    def infer(rec):
        probs = predict_probs(model, manifest.load_pixels(rec, scale),
                              manifest.channel_means)
        return int(np.argmax(probs[0]))

    workers = worker_count(len(records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(infer, records))
    else:
        preds = [infer(rec) for rec in records]
    y_true = np.array([r.class_label for r in records])
    per_class, mca, confusion = aggregate_predictions(
        y_true, np.array(preds), manifest.num_classes)
    return ScaleResult(per_class_accuracy=per_class, mca=mca, confusion=confusion)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise EvalError(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise EvalError("correlation undefined for a constant vector")
    return float((xc * yc).sum() / (sx * sy))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of tied positions
        i = j + 1
    return ranks


def correlation_matrix(accuracy_vectors, method: str = "pearson") -> np.ndarray:
    """Pairwise correlation of per-class accuracy vectors across scales."""
    vectors = [np.asarray(v, dtype=np.float64) for v in accuracy_vectors]
    if len(vectors) < 2:
        raise EvalError("need at least 2 scales for a correlation matrix")
    if method == "spearman":
        vectors = [_average_ranks(v) for v in vectors]
    elif method != "pearson":
        raise EvalError(f"unknown correlation method {method!r}")
    s = len(vectors)
    mat = np.empty((s, s), dtype=np.float64)
    for i in range(s):
        for j in range(i, s):
            mat[i, j] = mat[j, i] = pearson(vectors[i], vectors[j])
    return mat


def classify_trends(scales, accuracy_vectors, epsilon: float = DEFAULT_TREND_EPSILON):
    """Least-squares slope of accuracy against log2(scale), per class.

    |slope| <= epsilon is Invariant; otherwise the sign decides Increasing
    or Decreasing. Returns (labels, counts) with counts over all three
    labels.
    """
    scales = [int(s) for s in scales]
    if len(scales) < 2:
        raise EvalError("need at least 2 scales to classify trends")
    if sorted(scales) != scales:
        raise EvalError("scales must be sorted ascending")
    acc = np.stack([np.asarray(v, dtype=np.float64) for v in accuracy_vectors])
    if acc.shape[0] != len(scales):
        raise EvalError("one accuracy vector per scale required")
    x = np.log2(np.asarray(scales, dtype=np.float64))
    xc = x - x.mean()
    slopes = (xc @ (acc - acc.mean(axis=0))) / (xc * xc).sum()
    labels = []
    for slope in slopes:
        if abs(slope) <= epsilon:
            labels.append("Invariant")
        elif slope > 0:
            labels.append("Increasing")
        else:
            labels.append("Decreasing")
    counts = {name: labels.count(name) for name in TREND_LABELS}
    return labels, counts


@dataclass
class EvalReport:
    scales: tuple[int, ...]
    num_classes: int
    per_scale: dict[int, ScaleResult]
    correlation: np.ndarray
    trends: list[str]
    trend_counts: dict[str, int]
    epsilon: float = DEFAULT_TREND_EPSILON

    def validate(self) -> None:
        if not self.trends:
            raise EvalError("report has no trend labels")
        if sum(self.trend_counts.values()) != self.num_classes:
            raise EvalError("trend counts must sum to the class count")
        s = len(self.scales)
        if self.correlation.shape != (s, s):
            raise EvalError(f"correlation must be {s}x{s}")
        if not np.allclose(self.correlation, self.correlation.T, atol=1e-9):
            raise EvalError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(self.correlation), 1.0, atol=1e-9):
            raise EvalError("correlation diagonal must be 1")
        for scale in self.scales:
            r = self.per_scale[scale]
            if abs(r.mca - r.per_class_accuracy.mean()) > 1e-12:
                raise EvalError(f"scale {scale}: mca != mean per-class accuracy")


def build_report(scales, per_scale: dict[int, ScaleResult],
                 epsilon: float = DEFAULT_TREND_EPSILON,
                 method: str = "pearson") -> EvalReport:
    scales = tuple(sorted(int(s) for s in scales))
    vectors = [per_scale[s].per_class_accuracy for s in scales]
    correlation = correlation_matrix(vectors, method=method)
    trends, counts = classify_trends(scales, vectors, epsilon)
    report = EvalReport(
        scales=scales, num_classes=len(vectors[0]), per_scale=dict(per_scale),
        correlation=correlation, trends=trends, trend_counts=counts,
        epsilon=epsilon)
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def emit_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write the machine report at `path` and a summary table beside it.

    The machine format is line-oriented: a header of key=value lines, one
    [scale N] section per scale, a [correlation] section holding the matrix
    as space-separated rows, and a [trends] section. Floats are written with
    repr so parsing reproduces them exactly; byte output is deterministic.
    """
    report.validate()
    path = Path(path)
    lines = ["fcna-eval-report 1"]
    lines.append("scales=" + ",".join(str(s) for s in report.scales))
    lines.append(f"num_classes={report.num_classes}")
    lines.append(f"epsilon={report.epsilon!r}")
    for scale in report.scales:
        r = report.per_scale[scale]
        lines.append(f"[scale {scale}]")
        lines.append(f"mca={r.mca!r}")
        lines.append("per_class_accuracy="
                     + ",".join(repr(float(a)) for a in r.per_class_accuracy))
        lines.append("confusion="
                     + ";".join(",".join(str(int(c)) for c in row)
                                for row in r.confusion))
    lines.append("[correlation]")
    for row in report.correlation:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("[trends]")
    for k, label in enumerate(report.trends):
        lines.append(f"class.{k}={label}")
    lines.append("counts=" + ",".join(
        f"{name}:{report.trend_counts.get(name, 0)}" for name in TREND_LABELS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary_path = path.with_suffix(".txt")
    summary_path.write_text(render_summary(report), encoding="utf-8")
    return path, summary_path


def load_report(path) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise EvalError(f"report not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("fcna-eval-report"):
        raise EvalError(f"{path}: missing fcna-eval-report header")
    header: dict[str, str] = {}
    per_scale: dict[int, dict[str, str]] = {}
    matrix_rows: list[list[float]] = []
    trends_kv: dict[str, str] = {}
    section = "header"
    current_scale = None
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("[scale "):
            section = "scale"
            current_scale = int(ln[len("[scale "):-1])
            per_scale[current_scale] = {}
        elif ln == "[correlation]":
            section = "correlation"
        elif ln == "[trends]":
            section = "trends"
        elif section == "header":
            k, v = ln.split("=", 1)
            header[k] = v
        elif section == "scale":
            k, v = ln.split("=", 1)
            per_scale[current_scale][k] = v
        elif section == "correlation":
            matrix_rows.append([float(v) for v in ln.split()])
        else:
            k, v = ln.split("=", 1)
            trends_kv[k] = v

    try:
        scales = tuple(int(s) for s in header["scales"].split(","))
        num_classes = int(header["num_classes"])
        epsilon = float(header.get("epsilon", repr(DEFAULT_TREND_EPSILON)))
        results = {}
        for scale in scales:
            sec = per_scale[scale]
            acc = np.array([float(v) for v in sec["per_class_accuracy"].split(",")])
            confusion = np.array(
                [[int(c) for c in row.split(",")]
                 for row in sec["confusion"].split(";")], dtype=np.int64)
            results[scale] = ScaleResult(
                per_class_accuracy=acc, mca=float(sec["mca"]), confusion=confusion)
        trends = [trends_kv[f"class.{k}"] for k in range(num_classes)]
        counts = {}
        for part in trends_kv["counts"].split(","):
            name, value = part.split(":")
            counts[name] = int(value)
    except (KeyError, ValueError) as exc:
        raise EvalError(f"{path}: malformed report ({exc})") from exc
    report = EvalReport(
        scales=scales, num_classes=num_classes, per_scale=results,
        correlation=np.array(matrix_rows, dtype=np.float64), trends=trends,
        trend_counts=counts, epsilon=epsilon)
    report.validate()
    return report


def render_summary(report: EvalReport) -> str:
    """Human-readable tables: MCA per scale, correlations, trend counts."""
    out = ["Mean class accuracy per scale"]
    out.append(f"  {'scale':>8}  {'MCA':>6}")
    for scale in report.scales:
        out.append(f"  {scale:>8}  {100.0 * report.per_scale[scale].mca:>6.1f}")
    out.append("")
    out.append("Per-class accuracy correlations between scales")
    head = "  " + " ".join(f"{s:>8}" for s in report.scales)
    out.append(" " * 8 + head)
    for i, scale in enumerate(report.scales):
        row = " ".join(f"{v:>8.2f}" for v in report.correlation[i])
        out.append(f"{scale:>8}  {row}")
    out.append("")
    out.append("Accuracy trend as scale increases")
    for name in TREND_LABELS:
        out.append(f"  {name:>10}: {report.trend_counts.get(name, 0)}")
    out.append("")
    return "\n".join(out)

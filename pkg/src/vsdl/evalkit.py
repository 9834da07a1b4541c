"""Threshold metrics, ROC sweep, trapezoidal AUC and the Youden operating point."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass
class RocCurve:
    """ROC points from the strictest threshold (+inf) down to the lowest score."""
    fpr: list[float]
    tpr: list[float]
    thresholds: list[float]

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


@dataclass
class CaseResult:
    id: str
    score: float
    label: int
    prediction: int


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float
    auc: float
    threshold: float
    threshold_source: str = "youden"
    cases: list[CaseResult] = field(default_factory=list)
    model: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = json_float(self.threshold)
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        d["cases"] = [CaseResult(**c) for c in d.get("cases", [])]
        d["threshold"] = float(d["threshold"])
        return cls(**d)

    def table(self) -> str:
        """Two-by-two matrix plus metrics, laid out as a results table."""
        cm = self.confusion
        rows = [
            f"{'':18s}{'True Unstable':>15s}{'True Control':>15s}",
            f"{'Predicted Unstable':18s}{cm.tp:>15d}{cm.fp:>15d}",
            f"{'Predicted Control':18s}{cm.fn:>15d}{cm.tn:>15d}",
            "",
            f"Sensitivity {self.sensitivity:.2f}   Specificity {self.specificity:.2f}   "
            f"Accuracy {self.accuracy:.2f}   F1-score {self.f1:.2f}",
            f"AUC {self.auc:.3f}   threshold {self.threshold:.6g} ({self.threshold_source})",
        ]
        return "\n".join(rows)


def json_float(x: float):
    # JSON has no infinity; the all-negative operating point is written as a string
    return "inf" if math.isinf(x) else float(x)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise InputError("need at least one score")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    return s, y.astype(np.int64)


def confusion_at(scores: Sequence[float], labels: Sequence[int], threshold: float) -> ConfusionMatrix:
    """Tally predictions ``score >= threshold`` against labels."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return ConfusionMatrix(tp, fn, fp, tn)


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """(sensitivity, specificity, accuracy, F1); a zero denominator gives 0."""
    if cm.total <= 0:
        raise InputError("confusion matrix is empty")

    def ratio(num, den):
        return num / den if den else 0.0

    sens = ratio(cm.tp, cm.tp + cm.fn)
    spec = ratio(cm.tn, cm.tn + cm.fp)
    acc = (cm.tp + cm.tn) / cm.total
    f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    return sens, spec, acc, f1


def roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC is undefined unless both classes are present")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    # last index of each run of tied scores: ties move together
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    fpr = [0.0] + (fps[last] / n_neg).tolist()
    tpr = [0.0] + (tps[last] / n_pos).tolist()
    thr = [math.inf] + s_sorted[last].tolist()
    return RocCurve(fpr, tpr, thr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    x = np.asarray(curve.fpr, dtype=np.float64)
    y = np.asarray(curve.tpr, dtype=np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def optimal_threshold(curve: RocCurve) -> float:
    """Threshold maximising tpr - fpr; ties go to lower fpr, then lower threshold."""
    best = None
    for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
        key = (t - f, -f, -th)
        if best is None or key > best[0]:
            best = (key, th)
    return best[1]


def mann_whitney(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), by direct pair enumeration."""
    s, y = _check(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise InputError("both classes are required")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def evaluate_scores(ids: Sequence[str], scores: Sequence[float], labels: Sequence[int],
                    threshold: float | None = None, model: str = "") -> EvalReport:
    """Full report; without an explicit ``threshold`` the Youden point is used."""
    s, y = _check(scores, labels)
    curve = roc(s, y)
    area = auc(curve)
    source = "override"
    if threshold is None:
        threshold = optimal_threshold(curve)
        source = "youden"
    cm = confusion_at(s, y, threshold)
    sens, spec, acc, f1 = metrics(cm)
    cases = [CaseResult(str(i), float(sc), int(lb), int(sc >= threshold))
             for i, sc, lb in zip(ids, s, y)]
    return EvalReport(cm, sens, spec, acc, f1, area, float(threshold), source, cases, model)


def write_roc_csv(curve: RocCurve, path) -> None:
    lines = ["threshold,fpr,tpr"]
    for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{th!r},{f!r},{t!r}")
    Path(path).write_text("\n".join(lines) + "\n")


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def roc_svg(curves: dict[str, RocCurve], title: str = "ROC") -> str:
    """Standalone SVG line plot: one trace per curve, chance diagonal, AUC legend."""
    w, h, m = 480, 480, 60
    side = w - 2 * m

    def px(f, t):
        return m + f * side, h - m - t * side

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>',
        f'<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="black"/>',
        f'<line class="diagonal" x1="{m}" y1="{h - m}" x2="{m + side}" y2="{m}" '
        'stroke="grey" stroke-dasharray="6,4"/>',
    ]
    for k in range(6):
        v = k / 5
        x, y = px(v, 0)
        parts.append(f'<text x="{x:.1f}" y="{h - m + 18}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{v:.1f}</text>')
        x, y = px(0, v)
        parts.append(f'<text x="{m - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{v:.1f}</text>')
    parts.append(f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle" font-family="sans-serif" '
                 'font-size="13">False positive rate</text>')
    parts.append(f'<text x="18" y="{h / 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {h / 2})">True positive rate</text>')
    for k, (name, curve) in enumerate(curves.items()):
        colour = _COLOURS[k % len(_COLOURS)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (px(f, t) for f, t in zip(curve.fpr, curve.tpr)))
        parts.append(f'<polyline class="roc" data-model="{name}" points="{pts}" fill="none" '
                     f'stroke="{colour}" stroke-width="2"/>')
        ly = h - m - 12 - 18 * (len(curves) - 1 - k)
        parts.append(f'<line x1="{w - m - 170}" y1="{ly - 4}" x2="{w - m - 150}" y2="{ly - 4}" '
                     f'stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text class="legend" data-model="{name}" data-auc="{auc(curve):.4f}" '
                     f'x="{w - m - 145}" y="{ly}" font-family="sans-serif" font-size="12">'
                     f'{name} (AUC = {auc(curve):.2f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

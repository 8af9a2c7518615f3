"""3D IoU, average precision and comparison reports."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pointcloud import Box

THRESHOLDS = (0.3, 0.5)
CONFIG_LABELS = ("single-sensor", "input-fusion", "max", "concat-k1", "concat-k3")


def _bounds(b) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(b.center, dtype=np.float64)
    h = np.asarray(b.size, dtype=np.float64) / 2.0
    return c - h, c + h


def iou3d(a, b) -> float:
    """Axis-aligned 3D IoU of two boxes exposing ``center`` and ``size``."""
    alo, ahi = _bounds(a)
    blo, bhi = _bounds(b)
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None)))
    union = float(np.prod(ahi - alo) + np.prod(bhi - blo)) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(dets: Sequence, truth: Sequence) -> np.ndarray:
    if not dets or not truth:
        return np.zeros((len(dets), len(truth)))
    dlo, dhi = map(np.array, zip(*(_bounds(d) for d in dets)))
    tlo, thi = map(np.array, zip(*(_bounds(t) for t in truth)))
    ext = np.clip(np.minimum(dhi[:, None], thi[None]) - np.maximum(dlo[:, None], tlo[None]), 0.0, None)
    inter = ext.prod(axis=2)
    union = (dhi - dlo).prod(axis=1)[:, None] + (thi - tlo).prod(axis=1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class APResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    matched: int
    unmatched_detections: int
    unmatched_truth: int
    warning: str | None = None


def average_precision_frames(frames: Sequence[tuple[Sequence, Sequence[Box]]], threshold: float) -> APResult:
    """AP over several frames: match within each frame, rank detections globally by score.

    Greedy matching in descending score order (stable for ties); each detection
    takes the highest-IoU unmatched truth at or above ``threshold``. AP is the
    area under the all-point interpolated precision-recall curve.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1), got {threshold}")
    scores, hits = [], []
    n_truth = 0
    for dets, truth in frames:
        n_truth += len(truth)
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        ious = iou_matrix([dets[i] for i in order], list(truth))
        taken = np.zeros(len(truth), dtype=bool)
        for row, i in enumerate(order):
            hit = False
            if len(truth):
                cand = np.where(taken, -1.0, ious[row])
                j = int(np.argmax(cand))
                if cand[j] >= threshold:
                    taken[j] = True
                    hit = True
            scores.append(dets[i].score)
            hits.append(hit)
    n_det = len(scores)
    if n_truth == 0:
        warn = "no ground truth boxes; AP reported as 0" if n_det else None
        return APResult(0.0, np.zeros(0), np.zeros(0), 0, n_det, 0, warn)
    if n_det == 0:
        return APResult(0.0, np.zeros(0), np.zeros(0), 0, 0, n_truth)
    rank = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(hits)[rank])
    fp = np.cumsum(~np.asarray(hits)[rank])
    recall = tp / n_truth
    precision = tp / (tp + fp)
    ap = _envelope_area(tp, fp, n_truth)
    matched = int(tp[-1])
    return APResult(ap, precision, recall, matched, n_det - matched, n_truth - matched)


def _envelope_area(tp: np.ndarray, fp: np.ndarray, n_truth: int) -> float:
    """All-point interpolated area from cumulative TP/FP counts.

    Summed in exact rationals so the result is the correctly rounded value.
    """
    prec = [Fraction(int(t), int(t + f)) for t, f in zip(tp, fp)]
    env = prec[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    area, prev = Fraction(0), 0
    for t, e in zip(tp, env):
        if t > prev:
            area += Fraction(int(t - prev), n_truth) * e
            prev = t
    return float(area)


def average_precision(dets: Sequence, truth: Sequence[Box], threshold: float) -> APResult:
    return average_precision_frames([(dets, truth)], threshold)


@dataclass
class EvalResult:
    label: str
    ap: dict[float, float]
    curves: dict[float, list[tuple[float, float]]] = field(default_factory=dict)
    matched: dict[float, int] = field(default_factory=dict)
    unmatched_detections: dict[float, int] = field(default_factory=dict)
    unmatched_truth: dict[float, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = lambda t: f"{t:g}"  # noqa: E731
        return {
            "label": self.label,
            "ap": {key(t): v for t, v in self.ap.items()},
            "curves": {key(t): [list(p) for p in c] for t, c in self.curves.items()},
            "matched": {key(t): v for t, v in self.matched.items()},
            "unmatched_detections": {key(t): v for t, v in self.unmatched_detections.items()},
            "unmatched_truth": {key(t): v for t, v in self.unmatched_truth.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d) -> "EvalResult":
        f = lambda m: {float(k): v for k, v in m.items()}  # noqa: E731
        return cls(d["label"], f(d["ap"]), {float(k): [tuple(p) for p in c] for k, c in d["curves"].items()},
                   f(d["matched"]), f(d["unmatched_detections"]), f(d["unmatched_truth"]), list(d["warnings"]))


def evaluate(label: str, frames: Sequence[tuple[Sequence, Sequence[Box]]],
             thresholds: Sequence[float] = THRESHOLDS) -> EvalResult:
    res = EvalResult(label, {})
    for t in thresholds:
        r = average_precision_frames(frames, t)
        res.ap[t] = r.ap
        res.curves[t] = [(float(p), float(q)) for p, q in zip(r.recall, r.precision)]
        res.matched[t] = r.matched
        res.unmatched_detections[t] = r.unmatched_detections
        res.unmatched_truth[t] = r.unmatched_truth
        if r.warning and r.warning not in res.warnings:
            res.warnings.append(r.warning)
    return res


def eval_report(results: Sequence[EvalResult], timing=None) -> dict:
    """Accuracy table (one row per configuration, in the given order) plus the timing report."""
    thresholds = sorted({t for r in results for t in r.ap})
    doc = {
        "columns": [f"AP@{t:g}" for t in thresholds],
        "rows": [r.to_dict() for r in results],
        "timing": timing.to_dict() if timing is not None else None,
    }
    return doc


def report_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_text(doc: dict) -> str:
    cols = doc["columns"]
    rows = doc["rows"]
    width = max([len("configuration")] + [len(r["label"]) for r in rows])
    lines = ["configuration".ljust(width) + "".join(c.rjust(10) for c in cols)]
    for r in rows:
        vals = [r["ap"].get(c.split("@")[1]) for c in cols]
        lines.append(r["label"].ljust(width) + "".join(
            (f"{100 * v:.2f}" if v is not None else "-").rjust(10) for v in vals))
    text = "\n".join(lines) + "\n"
    if doc.get("timing"):
        from .runtime import TimingReport
        text += "\n" + TimingReport.from_dict(doc["timing"]).to_text()
    return text


def boxes_within(boxes: Sequence[Box], lo, hi) -> list[Box]:
    """Boxes whose center lies inside the axis-aligned region [lo, hi) (e.g. the integration range)."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return [b for b in boxes if np.all(np.asarray(b.center) >= lo) and np.all(np.asarray(b.center) < hi)]

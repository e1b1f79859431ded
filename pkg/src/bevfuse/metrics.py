"""Center-distance detection metrics: AP, true-positive errors and NDS.

Constants follow the public nuScenes detection benchmark: thresholds
0.5/1/2/4 m, TP errors at 2 m, recall and precision floors of 0.1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D, normalize_yaw

TP_METRICS = ("trans_err", "scale_err", "orient_err", "vel_err", "attr_err")
TP_COLUMNS = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass(frozen=True)
class EvalConfig:
    class_names: Tuple[str, ...] = ("car", "pedestrian", "truck")
    dist_ths: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    dist_th_tp: float = 2.0
    min_recall: float = 0.1
    min_precision: float = 0.1
    max_range: Optional[float] = 50.0  # single global BEV range filter, meters from ego

    def __post_init__(self):
        if list(self.dist_ths) != sorted(self.dist_ths):
            raise ValueError("distance thresholds must be sorted ascending")


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]]  # (pred index, gt index, center distance)
    false_positives: List[int]
    false_negatives: List[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)


def center_distance(a: Box3D, b: Box3D) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def score_order(preds: Sequence[Box3D]) -> List[int]:
    """Indices by descending score; ties keep insertion order."""
    return sorted(range(len(preds)), key=lambda i: -(preds[i].score or 0.0))


def match(preds: Sequence[Box3D], gts: Sequence[Box3D], threshold: float) -> MatchResult:
    """Greedy matching: each prediction, by descending score, takes the
    nearest unmatched same-class ground truth closer than ``threshold``."""
    taken = np.zeros(len(gts), dtype=bool)
    gt_xy = np.array([g.center[:2] for g in gts]).reshape(-1, 2)
    gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
    pairs, fps = [], []
    for i in score_order(preds):
        p = preds[i]
        if len(gts):
            d = np.hypot(gt_xy[:, 0] - p.center[0], gt_xy[:, 1] - p.center[1])
            d = np.where((gt_cls == p.class_id) & ~taken, d, np.inf)
            j = int(np.argmin(d))
            if d[j] < threshold:
                taken[j] = True
                pairs.append((i, j, float(d[j])))
                continue
        fps.append(i)
    return MatchResult(pairs, fps, [j for j in range(len(gts)) if not taken[j]])


# ---------------------------------------------------------------------------
# AP
# ---------------------------------------------------------------------------

def precision_recall(scores: np.ndarray, is_tp: np.ndarray, num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order]).astype(np.float64)
    fp = np.cumsum(~is_tp[order]).astype(np.float64)
    return tp / np.maximum(tp + fp, 1e-12), tp / num_gt


def ap_from_pr(precision: np.ndarray, recall: np.ndarray, min_recall: float = 0.1,
               min_precision: float = 0.1) -> float:
    """Area under the 101-point interpolated PR curve above both floors,
    normalized so a perfect curve scores 1 (area divided by 0.9 * 0.9)."""
    if len(precision) == 0:
        return 0.0
    grid = np.linspace(0.0, 1.0, 101)
    prec = np.interp(grid, recall, precision, right=0.0)
    prec = prec[int(round(100 * min_recall)) + 1:] - min_precision
    prec[prec < 0] = 0.0
    return float(np.mean(prec)) / (1.0 - min_precision)


def pr_curve(per_frame: Iterable[Tuple[Sequence[Box3D], Sequence[Box3D]]], class_id: int,
             threshold: float) -> Tuple[np.ndarray, np.ndarray, int]:
    """Precision and recall after each prediction in score order, and the GT count."""
    scores, flags, num_gt = [], [], 0
    for preds, gts in per_frame:
        p = [b for b in preds if b.class_id == class_id]
        g = [b for b in gts if b.class_id == class_id]
        num_gt += len(g)
        res = match(p, g, threshold)
        tp_idx = {i for i, _, _ in res.pairs}
        for i in score_order(p):
            scores.append(p[i].score or 0.0)
            flags.append(i in tp_idx)
    if num_gt == 0 or not scores:
        return np.zeros(0), np.zeros(0), num_gt
    prec, rec = precision_recall(np.array(scores), np.array(flags, dtype=bool), num_gt)
    return prec, rec, num_gt


def average_precision(per_frame: Iterable[Tuple[Sequence[Box3D], Sequence[Box3D]]], class_id: int,
                      threshold: float, cfg: EvalConfig = EvalConfig()) -> Optional[float]:
    """AP of one class at one threshold; None when the class has no ground truth."""
    prec, rec, num_gt = pr_curve(per_frame, class_id, threshold)
    if num_gt == 0:
        return None
    return ap_from_pr(prec, rec, cfg.min_recall, cfg.min_precision)


# ---------------------------------------------------------------------------
# TP errors
# ---------------------------------------------------------------------------

def yaw_difference(a: float, b: float) -> float:
    """Smallest absolute angle between two headings, in [0, pi]."""
    return abs(normalize_yaw(a - b))


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """3D IoU after translating and rotating both boxes onto each other."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (float(np.prod(a.size)) + float(np.prod(b.size)) - inter)


def pair_errors(pred: Box3D, gt: Box3D) -> Dict[str, float]:
    return {
        "trans_err": center_distance(pred, gt),
        "scale_err": 1.0 - aligned_iou(pred, gt),
        "orient_err": yaw_difference(pred.yaw, gt.yaw),
        "vel_err": float(np.linalg.norm(pred.velocity - gt.velocity)),
        "attr_err": float(pred.attribute_id != gt.attribute_id),
    }


def tp_metrics(pairs: Sequence[Tuple[Box3D, Box3D]]) -> Dict[str, float]:
    """Mean errors over matched (pred, gt) pairs; 1.0 each when there are none."""
    if not pairs:
        return {k: 1.0 for k in TP_METRICS}
    errs = [pair_errors(p, g) for p, g in pairs]
    return {k: float(np.mean([e[k] for e in errs])) for k in TP_METRICS}


def nds(mean_ap: float, tp_means: Sequence[float]) -> float:
    """(5 mAP + sum over five TP errors of (1 - min(1, err))) / 10."""
    tp_means = list(tp_means)
    if len(tp_means) != 5:
        raise ValueError("nds needs exactly five TP error means")
    return (5.0 * mean_ap + sum(1.0 - min(1.0, m) for m in tp_means)) / 10.0


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    class_names: Tuple[str, ...]
    ap: Dict[str, Dict[str, Optional[float]]]    # class -> threshold -> AP
    class_ap: Dict[str, Optional[float]]         # mean over thresholds
    class_tp: Dict[str, Dict[str, float]]
    mean_ap: float
    tp: Dict[str, float]                         # mean over evaluated classes
    nd_score: float
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    num_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "mAP": self.mean_ap,
            "NDS": self.nd_score,
            **{col: self.tp[k] for col, k in zip(TP_COLUMNS, TP_METRICS)},
            "per_class": {
                name: {"AP": self.class_ap[name], "AP_by_threshold": self.ap[name], **self.class_tp[name],
                       **self.counts.get(name, {})}
                for name in self.class_names
            },
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table(self, label: str = "model") -> str:
        """Aligned text table with the mAP/NDS/TP-error column layout."""
        head = ["Model", "mAP", "NDS"] + list(TP_COLUMNS)
        row = [label, self.mean_ap, self.nd_score] + [self.tp[k] for k in TP_METRICS]
        lines = [_fmt_row(head), _fmt_row(row)]
        lines.append("")
        lines.append(_fmt_row(["Class", "AP", "", "ATE", "ASE", "AOE", "AVE", "AAE"]))
        for name in self.class_names:
            ap = self.class_ap[name]
            lines.append(_fmt_row([name, "n/a" if ap is None else ap, ""] +
                                  [self.class_tp[name][k] for k in TP_METRICS]))
        return "\n".join(lines) + "\n"


def _fmt_row(cells) -> str:
    out = []
    for i, c in enumerate(cells):
        text = f"{c:.3f}" if isinstance(c, float) else str(c)
        out.append(text.ljust(14) if i == 0 else text.rjust(7))
    return " ".join(out).rstrip()


def _in_range(box: Box3D, max_range: Optional[float]) -> bool:
    return max_range is None or float(np.hypot(box.center[0], box.center[1])) <= max_range


def evaluate(gts: Mapping[str, Sequence[Box3D]], preds: Mapping[str, Sequence[Box3D]],
             cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Evaluate predictions keyed by sample id against ground truth.

    Samples missing from ``preds`` count as empty predictions; prediction
    samples absent from ``gts`` are ignored.
    """
    sample_ids = sorted(gts)
    frames = _frames(gts, preds, cfg)
    ap, class_ap, class_tp, counts = {}, {}, {}, {}
    for k, name in enumerate(cfg.class_names):
        ap[name] = {str(t): average_precision(frames, k, t, cfg) for t in cfg.dist_ths}
        vals = list(ap[name].values())
        class_ap[name] = None if vals[0] is None else float(np.mean(vals))
        pairs = []
        n_pred = n_gt = 0
        for p, g in frames:
            pk = [b for b in p if b.class_id == k]
            gk = [b for b in g if b.class_id == k]
            n_pred += len(pk)
            n_gt += len(gk)
            res = match(pk, gk, cfg.dist_th_tp)
            pairs.extend((pk[i], gk[j]) for i, j, _ in res.pairs)
        class_tp[name] = tp_metrics(pairs)
        counts[name] = {"num_gt": n_gt, "num_pred": n_pred, "num_tp": len(pairs)}
    evaluated = [n for n in cfg.class_names if class_ap[n] is not None]
    mean_ap = float(np.mean([class_ap[n] for n in evaluated])) if evaluated else 0.0
    tp = {k: float(np.mean([class_tp[n][k] for n in evaluated])) if evaluated else 1.0 for k in TP_METRICS}
    return MetricsReport(tuple(cfg.class_names), ap, class_ap, class_tp, mean_ap, tp,
                         nds(mean_ap, [tp[k] for k in TP_METRICS]), counts, len(sample_ids))


def _frames(gts: Mapping[str, Sequence[Box3D]], preds: Mapping[str, Sequence[Box3D]], cfg: EvalConfig) -> list:
    frames = []
    for sid in sorted(gts):
        g = [b for b in gts[sid] if _in_range(b, cfg.max_range)]
        p = [b for b in preds.get(sid, []) if _in_range(b, cfg.max_range)]
        frames.append((p, g))
    return frames


def pr_curves(gts: Mapping[str, Sequence[Box3D]], preds: Mapping[str, Sequence[Box3D]],
              cfg: EvalConfig = EvalConfig()) -> List[Tuple[str, float, float, float]]:
    """Rows (class, threshold, recall, precision) for plotting, one per ranked prediction."""
    frames = _frames(gts, preds, cfg)
    rows = []
    for k, name in enumerate(cfg.class_names):
        for t in cfg.dist_ths:
            prec, rec, _ = pr_curve(frames, k, t)
            rows.extend((name, float(t), float(r), float(p)) for p, r in zip(prec, rec))
    return rows


# ---------------------------------------------------------------------------
# scene filtering
# ---------------------------------------------------------------------------

def _description(item) -> str:
    if isinstance(item, str):
        return item
    if isinstance(item, Mapping):
        return str(item.get("description", ""))
    return str(getattr(item, "description", ""))


def filter_scenes(samples: Iterable, term: str, key: Callable[[object], str] = _description) -> list:
    """Samples whose scene description contains ``term`` (case-insensitive)."""
    needle = (term or "").lower()
    return [s for s in samples if needle in key(s).lower()]


# ---------------------------------------------------------------------------
# published rows used as NDS fixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PublishedRow:
    table: str
    name: str
    mean_ap: float
    nds: float
    tp: Tuple[float, float, float, float, float]  # ATE, ASE, AOE, AVE, AAE


PUBLISHED_ROWS = (
    PublishedRow("val", "BEVDet", 0.350, 0.411, (0.660, 0.275, 0.532, 0.918, 0.260)),
    PublishedRow("val", "BEVDet + RadarGridMap", 0.429, 0.525, (0.523, 0.272, 0.507, 0.412, 0.183)),
    PublishedRow("val", "BEVDet + BEVFeatureNet", 0.434, 0.525, (0.511, 0.270, 0.527, 0.421, 0.182)),
    PublishedRow("val", "BEVDepth", 0.359, 0.480, (0.612, 0.269, 0.507, 0.409, 0.201)),
    PublishedRow("val", "BEVDepth + BEVFeatureNet", 0.405, 0.521, (0.542, 0.274, 0.512, 0.309, 0.181)),
    PublishedRow("val", "BEVStereo", 0.372, 0.500, (0.598, 0.270, 0.438, 0.367, 0.190)),
    PublishedRow("val", "BEVStereo + BEVFeatureNet", 0.423, 0.545, (0.504, 0.268, 0.453, 0.270, 0.174)),
    PublishedRow("val", "MatrixVT", 0.319, 0.400, (0.669, 0.281, 0.494, 0.912, 0.238)),
    PublishedRow("val", "MatrixVT + BEVFeatureNet", 0.386, 0.495, (0.549, 0.275, 0.539, 0.423, 0.193)),
    PublishedRow("test", "CenterFusion", 0.326, 0.449, (0.631, 0.261, 0.516, 0.614, 0.115)),
    PublishedRow("test", "CRAFT", 0.411, 0.523, (0.467, 0.268, 0.456, 0.519, 0.114)),
    PublishedRow("test", "TransCAR", 0.422, 0.522, (0.630, 0.260, 0.383, 0.495, 0.121)),
    PublishedRow("test", "BEVDet + BEVFeatureNet", 0.476, 0.567, (0.444, 0.244, 0.461, 0.439, 0.128)),
)
NDS_TOLERANCE = 0.002


def check_published_rows(rows: Sequence[PublishedRow] = PUBLISHED_ROWS) -> List[Tuple[PublishedRow, float, bool]]:
    """Recompute NDS for every published row: (row, recomputed, within tolerance)."""
    out = []
    for r in rows:
        value = nds(r.mean_ap, r.tp)
        out.append((r, value, abs(value - r.nds) <= NDS_TOLERANCE + 1e-12))
    return out

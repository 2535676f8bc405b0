"""OOD separation metrics and in-distribution detection quality."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import BoundingBox, DetectionDataset

IN, OOD = "in_dist", "ood"
TPR_TARGET_PERCENT = 95

# Published object-level results with VOC as in-distribution and COCO as OOD
# (FPR95 %, AUROC %, mAP %). Shown next to local runs for orientation only.
REFERENCE_RESULTS = (
    ("MSP", 70.99, 83.45, 48.7),
    ("ODIN", 59.82, 82.20, 48.7),
    ("Mahalanobis", 96.46, 59.25, 48.7),
    ("Energy score", 56.89, 83.69, 48.7),
    ("Gram matrices", 62.75, 79.88, 48.7),
    ("Generalized ODIN", 59.57, 83.12, 48.1),
    ("VOS", 47.77, 89.00, 51.5),
    ("FFS", 44.15, 89.71, 51.8),
    ("Pixel-space outliers, generic prompts", 59.37, 80.43, 48.2),
    ("Pixel-space outliers, distance-based (sigma=2.5)", 65.03, 79.27, 49.5),
)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredInstance:
    ood_score: float
    truth: str
    source: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.truth not in (IN, OOD):
            raise MetricsError(f"truth must be {IN!r} or {OOD!r}")
        if not (np.isfinite(self.ood_score) and 0.0 <= self.ood_score <= 1.0):
            raise MetricsError(f"ood_score {self.ood_score} outside [0, 1]")


def _split(instances: Sequence[ScoredInstance]) -> tuple[np.ndarray, np.ndarray]:
    s_in = np.array([i.ood_score for i in instances if i.truth == IN], dtype=np.float64)
    s_ood = np.array([i.ood_score for i in instances if i.truth == OOD], dtype=np.float64)
    if s_in.size == 0 or s_ood.size == 0:
        raise MetricsError("need at least one in-distribution and one OOD instance")
    return s_in, s_ood


def auroc_from_scores(s_in, s_ood) -> float:
    """Mann-Whitney AUROC: P(ood score > in score) + 0.5 P(tie)."""
    s_in = np.asarray(s_in, dtype=np.float64)
    s_ood = np.asarray(s_ood, dtype=np.float64)
    ranks = rankdata(np.concatenate([s_in, s_ood]))
    n_in, n_ood = s_in.size, s_ood.size
    u = ranks[n_in:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_in * n_ood))


def auroc(instances: Sequence[ScoredInstance]) -> float:
    return auroc_from_scores(*_split(instances))


def fpr_from_scores(s_in, s_ood, tpr_percent: int = TPR_TARGET_PERCENT) -> float:
    """Fraction of OOD accepted as in-distribution at the first threshold reaching the TPR.

    An instance is accepted when its score is below the threshold t. The
    accepted in-distribution fraction first reaches ``tpr_percent`` just
    above the k-th smallest in-distribution score, k = ceil(tpr * n_in);
    OOD instances scoring at or below that value are accepted with them.
    """
    s_in = np.sort(np.asarray(s_in, dtype=np.float64))
    s_ood = np.asarray(s_ood, dtype=np.float64)
    k = -(-tpr_percent * s_in.size // 100)
    cut = s_in[k - 1]
    return float(np.count_nonzero(s_ood <= cut) / s_ood.size)


def fpr_at_95_tpr(instances: Sequence[ScoredInstance]) -> float:
    return fpr_from_scores(*_split(instances))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.w * a.h + b.w * b.h - inter))


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: BoundingBox
    score: float
    index: int = 0

    @property
    def category_id(self) -> int:
        return self.box.category_id


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-points interpolated precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(detections: Iterable[Detection], truth: DetectionDataset,
                           iou_threshold: float = 0.5) -> dict:
    """Per-class AP and their mean over classes that have ground truth.

    Detections are ranked by score, ties broken by (image_id, index). Each
    one claims the unmatched ground-truth box of its class with the highest
    IoU, if that IoU reaches ``iou_threshold``. OOD annotations are ignored.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise MetricsError("iou_threshold must lie in (0, 1)")
    gt: dict[int, dict[int, list[BoundingBox]]] = defaultdict(lambda: defaultdict(list))
    for a in truth.annotations:
        if not a.is_ood:
            gt[a.box.category_id][a.image_id].append(a.box)
    if not gt:
        raise MetricsError("ground truth holds no in-distribution boxes")
    by_class: dict[int, list[Detection]] = defaultdict(list)
    for d in detections:
        by_class[d.category_id].append(d)

    names = truth.category_names
    per_class = {}
    for cid in sorted(gt):
        n_gt = sum(len(v) for v in gt[cid].values())
        used = {img: np.zeros(len(v), dtype=bool) for img, v in gt[cid].items()}
        dets = sorted(by_class.get(cid, []), key=lambda d: (-d.score, d.image_id, d.index))
        tp = np.zeros(len(dets))
        for r, d in enumerate(dets):
            boxes = gt[cid].get(d.image_id, [])
            best, best_iou = -1, -1.0
            for j, g in enumerate(boxes):
                if used[d.image_id][j]:
                    continue
                o = iou(d.box, g)
                if o >= iou_threshold and o > best_iou:
                    best, best_iou = j, o
            if best >= 0:
                used[d.image_id][best] = True
                tp[r] = 1.0
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1) if dets else np.zeros(0)
        per_class[names[cid]] = average_precision(recall, precision)
    return {"per_class_ap": per_class, "map": float(np.mean(list(per_class.values())))}


@dataclass
class MetricsReport:
    auroc: float
    fpr95: float
    per_class_ap: dict
    map: float
    counts: tuple[int, int]
    config_digest: str = ""
    label: str = ""
    raw: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auroc", "fpr95", "map"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise MetricsError(f"{name}={v} outside [0, 100]")

    @classmethod
    def from_fractions(cls, auroc_frac: float, fpr_frac: float, per_class_ap: dict,
                       map_frac: float, counts, **kw) -> "MetricsReport":
        pct = lambda v: round(100.0 * v, 2)
        return cls(
            auroc=pct(auroc_frac), fpr95=pct(fpr_frac),
            per_class_ap={k: pct(v) for k, v in per_class_ap.items()},
            map=pct(map_frac), counts=tuple(counts),
            raw={"auroc": auroc_frac, "fpr95": fpr_frac, "map": map_frac,
                 "per_class_ap": dict(per_class_ap)},
            **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["counts"] = tuple(d["counts"])
        return cls(**d)


TABLE_HEADER = ("Method", "FPR95 (%)", "AUROC (%)", "mAP (ID) (%)")


def markdown_table(reports: Sequence[MetricsReport], include_reference: bool = False) -> str:
    lines = ["| " + " | ".join(TABLE_HEADER) + " |", "|---|---:|---:|---:|"]
    if include_reference:
        for name, fpr, auc, m in REFERENCE_RESULTS:
            lines.append(f"| {name} (published) | {fpr:.2f} | {auc:.2f} | {m:.1f} |")
    for r in reports:
        lines.append(f"| {r.label or 'run'} | {r.fpr95:.2f} | {r.auroc:.2f} | {r.map:.2f} |")
    return "\n".join(lines) + "\n"


def csv_rows(reports: Sequence[MetricsReport]) -> str:
    out = [",".join(TABLE_HEADER)]
    out += [f"{r.label},{r.fpr95:.2f},{r.auroc:.2f},{r.map:.2f}" for r in reports]
    return "\n".join(out) + "\n"


def write_scores(instances: Sequence[ScoredInstance], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "box_index", "ood_score", "truth"])
        for inst in instances:
            w.writerow([inst.source[0], inst.source[1], repr(inst.ood_score), inst.truth])


def read_scores(path) -> list[ScoredInstance]:
    with open(path, newline="") as fh:
        return [ScoredInstance(float(r["ood_score"]), r["truth"],
                               (int(r["image_id"]), int(r["box_index"])))
                for r in csv.DictReader(fh)]


def load_reports(paths: Iterable) -> list[MetricsReport]:
    return [MetricsReport.from_json(Path(p).read_text()) for p in paths]

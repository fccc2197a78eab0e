"""Per-category AP, mAP@[.50:.95], AP50/AP75 and confidence-threshold sweeps.

AP uses all-point interpolation (exact area under the precision envelope).
Detections are ranked by score, ties broken by ``(scene_id, x1, y1, x2, y2)``;
each detection greedily takes the unmatched same-scene GT with highest IoU.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .config import FusionConfig
from .core import CHALLENGING_DEFAULT, BBox, iou
from .dataset_io import Dataset, DetectionFile
from .errors import UnknownCategory, UnknownScene
from .pipeline import refuse

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def thr_key(t: float) -> str:
    return f"{t:.2f}"


def match_detections(
    dets: Sequence[tuple[str, BBox, float]],
    gts: Sequence[tuple[str, BBox]],
    iou_thresh: float,
) -> tuple[list[tuple[str, BBox, float]], list[bool]]:
    """Rank detections and flag each as true/false positive."""
    ranked = sorted(dets, key=lambda d: (-d[2], d[0], d[1].x1, d[1].y1, d[1].x2, d[1].y2))
    by_scene: dict[str, list[BBox]] = defaultdict(list)
    for sid, box in gts:
        by_scene[sid].append(box)
    taken: dict[str, set[int]] = defaultdict(set)
    flags = []
    for sid, box, _ in ranked:
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(by_scene.get(sid, ())):
            if j in taken[sid]:
                continue
            v = iou(box, g)
            if v >= iou_thresh and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[sid].add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return ranked, flags


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP in percent; NaN when there is no ground truth."""
    if n_gt == 0:
        return math.nan
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / ranks
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]) * 100.0)


def ap_category(
    dets: Sequence[tuple[str, BBox, float]],
    gts: Sequence[tuple[str, BBox]],
    iou_thresh: float = 0.5,
) -> float:
    _, flags = match_detections(dets, gts, iou_thresh)
    return average_precision(flags, len(gts))


@dataclass
class EvalReport:
    thresholds: list[float]
    per_category: dict[str, dict[str, float | None]]
    mAP: float
    AP50: float
    AP75: float
    counts: dict[str, dict[str, int]]
    empty_categories: list[str]
    challenging: list[str] = field(default_factory=lambda: list(CHALLENGING_DEFAULT))

    def category_map(self, abbr: str) -> float | None:
        """Mean AP of one category over the COCO thresholds."""
        vals = [self.per_category[abbr][thr_key(t)] for t in COCO_THRESHOLDS]
        if any(v is None for v in vals):
            return None
        return math.fsum(vals) / len(vals)  # type: ignore[arg-type]

    def to_dict(self) -> dict[str, Any]:
        return {
            "thresholds": [thr_key(t) for t in self.thresholds],
            "per_category": self.per_category,
            "mAP": self.mAP,
            "AP50": self.AP50,
            "AP75": self.AP75,
            "counts": self.counts,
            "empty_categories": self.empty_categories,
            "groups": {
                "simple": [a for a in self.per_category if a not in self.challenging],
                "challenging": [a for a in self.per_category if a in self.challenging],
            },
            "notes": "AP in percent; mAP averages categories with GT over IoU .50:.95 step .05",
        }

    def to_table(self, iou_key: str = "0.50") -> str:
        simple = [a for a in self.per_category if a not in self.challenging]
        hard = [a for a in self.per_category if a in self.challenging]

        def fmt(v: float | None) -> str:
            return "  -  " if v is None else f"{v:5.1f}"

        head = ["mAP", "AP50", *simple, "|", *hard]
        row = [fmt(self.mAP), fmt(self.AP50)]
        row += [fmt(self.per_category[a][iou_key]) for a in simple]
        row += ["|"] + [fmt(self.per_category[a][iou_key]) for a in hard]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        lines = [
            f"per-category AP@{iou_key}  (simple | challenging)",
            " ".join(h.rjust(w) for h, w in zip(head, widths)),
            " ".join(r.rjust(w) for r, w in zip(row, widths)),
        ]
        return "\n".join(lines)


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def _clean(v: float) -> float | None:
    return None if math.isnan(v) else v


def evaluate(
    dets: DetectionFile,
    ds: Dataset,
    thresholds: Sequence[float] = (0.5, 0.75),
    challenging: Sequence[str] = CHALLENGING_DEFAULT,
) -> EvalReport:
    for sid, d in dets.records():
        if sid not in ds:
            raise UnknownScene(f"detection references unknown scene {sid!r}")
        if d.category not in ds.vocabulary:
            raise UnknownCategory(f"detection category {d.category.abbreviation!r} not in dataset vocabulary")
    for sid in dets.scenes:
        if sid not in ds:
            raise UnknownScene(f"detection file references unknown scene {sid!r}")
    all_thr = sorted({round(float(t), 4) for t in (*COCO_THRESHOLDS, *thresholds)})
    gts_by_cat: dict[str, list[tuple[str, BBox]]] = defaultdict(list)
    for scene in ds.scenes:
        for g in scene.main_gt:
            gts_by_cat[g.category.abbreviation].append((scene.scene_id, g.box))
    dets_by_cat: dict[str, list[tuple[str, BBox, float]]] = defaultdict(list)
    for sid, d in dets.records():
        dets_by_cat[d.category.abbreviation].append((sid, d.box, d.score))

    per_cat: dict[str, dict[str, float | None]] = {}
    raw: dict[str, dict[float, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    empty = []
    for cat in ds.vocabulary:
        a = cat.abbreviation
        gts, cdets = gts_by_cat.get(a, []), dets_by_cat.get(a, [])
        if not gts:
            empty.append(a)
        raw[a] = {}
        matched50 = 0
        for t in all_thr:
            _, flags = match_detections(cdets, gts, t)
            raw[a][t] = average_precision(flags, len(gts))
            if t == 0.5:
                matched50 = sum(flags)
        per_cat[a] = {thr_key(t): _clean(raw[a][t]) for t in all_thr}
        counts[a] = {"gt": len(gts), "detections": len(cdets), "matched@0.50": matched50}

    cat_maps = [_nanmean(raw[a][t] for t in COCO_THRESHOLDS) for a in raw]
    m = _nanmean(cat_maps)
    ap50 = _nanmean(raw[a][0.5] for a in raw)
    ap75 = _nanmean(raw[a][0.75] for a in raw)
    return EvalReport(
        thresholds=all_thr,
        per_category=per_cat,
        mAP=_clean(m) if not math.isnan(m) else 0.0,
        AP50=_clean(ap50) if not math.isnan(ap50) else 0.0,
        AP75=_clean(ap75) if not math.isnan(ap75) else 0.0,
        counts=counts,
        empty_categories=empty,
        challenging=[c for c in challenging],
    )


@dataclass
class SweepRow:
    threshold: float
    mAP: float
    AP50: float
    per_category_ap50: dict[str, float | None]


def threshold_sweep(
    cached_main: DetectionFile,
    cached_refined_aux: DetectionFile,
    ds: Dataset,
    thresholds: Sequence[float],
    fusion: FusionConfig | None = None,
) -> list[SweepRow]:
    """Re-fuse cached pipeline outputs at each confidence threshold and evaluate."""
    fusion = fusion or FusionConfig()
    missing = [s for s in ds.scene_ids if s not in cached_main.scenes]
    if missing:
        raise UnknownScene(f"cached main detections miss {len(missing)} scene(s), e.g. {missing[0]!r}")
    rows = []
    for t in sorted(set(float(x) for x in thresholds)):
        fz = FusionConfig(t, fusion.aux_categories, fusion.dedup_iou, fusion.strict_union)
        fused = refuse(cached_main, cached_refined_aux, fz)
        rep = evaluate(fused, ds)
        rows.append(
            SweepRow(t, rep.mAP, rep.AP50, {a: rep.per_category[a]["0.50"] for a in rep.per_category})
        )
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    cats = list(rows[0].per_category_ap50) if rows else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "mAP", "AP50", *[f"AP50_{c}" for c in cats]])
    for r in rows:
        w.writerow(
            [f"{r.threshold:.4g}", repr(r.mAP), repr(r.AP50)]
            + ["" if r.per_category_ap50[c] is None else repr(r.per_category_ap50[c]) for c in cats]
        )
    return buf.getvalue()


def sweep_to_json(rows: Sequence[SweepRow]) -> list[dict[str, Any]]:
    return [
        {"threshold": r.threshold, "mAP": r.mAP, "AP50": r.AP50, "per_category_ap50": r.per_category_ap50}
        for r in rows
    ]


def parse_range(spec: str) -> list[float]:
    """``"0.3:0.1:0.9"`` -> [0.3, 0.4, ..., 0.9] (inclusive); also accepts comma lists."""
    if ":" in spec:
        start, step, stop = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ValueError("step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 10) for k in range(max(n, 0))]
    return [float(x) for x in spec.split(",") if x.strip()]

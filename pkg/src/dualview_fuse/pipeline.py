"""End-to-end dual-view procedure.

Per scene: detect on the main view, detect on the auxiliary view, merge the
auxiliary boxes, map each merged box to a main-view strip and let the expert
for its category confirm/re-localise it, then fuse with the main detections.
Offline helpers export expert training crops and auxiliary pseudo-labels.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from ._io import write_json
from .backends import (
    Backends,
    BackendFailure,
    ExpertRegistry,
    PatchContext,
    classify_patch,
    make_detector,
    make_registry,
)
from .config import FusionConfig, PipelineConfig
from .core import (
    BBox,
    Detection,
    GreyImage,
    Source,
    canonical_sort,
    clip_coords,
    iou,
    save_grey,
)
from .crossview import main_strip_for_aux, match_and_transfer
from .dataset_io import Dataset, DetectionFile, PairedScene
from .errors import DatasetIOError, DualViewError, InvalidValue, NoOverlap
from .saliency import detect_salient

log = logging.getLogger(__name__)


# --- merge ----------------------------------------------------------------


def _nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    kept: list[Detection] = []
    for d in sorted(dets, key=Detection.sort_key):
        if any(k.category == d.category and iou(k.box, d.box) >= iou_thresh for k in kept):
            continue
        kept.append(d)
    return kept


def _weighted_average(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    order = sorted(dets, key=Detection.sort_key)
    parent = list(range(len(order)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(order)):
        for j in range(i + 1, len(order)):
            a, b = order[i], order[j]
            if a.category == b.category and iou(a.box, b.box) >= iou_thresh:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    clusters: dict[int, list[Detection]] = {}
    for i, d in enumerate(order):
        clusters.setdefault(find(i), []).append(d)
    out = []
    for members in clusters.values():
        lead = members[0]  # highest score by construction
        total = math.fsum(m.score for m in members)
        weights = [m.score / total for m in members] if total > 0 else [1.0 / len(members)] * len(members)
        coords = [math.fsum(w * m.box.as_list()[k] for w, m in zip(weights, members)) for k in range(4)]
        # coincident boxes must come back bit-identical
        if all(m.box == lead.box for m in members):
            box = lead.box
        else:
            box = BBox(*coords)
        out.append(Detection(box, lead.category, lead.score, lead.source))
    return out


def merge_boxes(dets: Sequence[Detection], strategy: str = "nms", iou_thresh: float = 0.5) -> list[Detection]:
    """Consolidate overlapping same-category boxes.

    ``nms`` keeps the highest-scoring box of each overlap group greedily;
    ``weighted_average`` clusters boxes transitively and returns the
    score-weighted mean box of each cluster with the cluster's max score.
    Output is sorted by score descending, ties by category id, x1, y1.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidValue(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    strategy = strategy.lower().replace("-", "_")
    if strategy == "nms":
        out = _nms(dets, iou_thresh)
    elif strategy in ("weighted_average", "weightedaverage", "wbf"):
        out = _weighted_average(dets, iou_thresh)
    else:
        raise InvalidValue(f"unknown merge strategy {strategy!r}")
    return canonical_sort(out)


# --- refinement and fusion --------------------------------------------------


@dataclass
class RefineResult:
    detections: list[Detection]
    skipped_no_expert: int = 0
    skipped_outside: int = 0
    rejected: int = 0


def refine_via_experts(
    scene: PairedScene,
    merged_aux: Sequence[Detection],
    registry: ExpertRegistry,
    cfg: PipelineConfig,
    main_image: GreyImage | None = None,
) -> RefineResult:
    main_image = main_image if main_image is not None else scene.load_main()
    res = RefineResult([])
    for det in merged_aux:
        expert = registry.get(det.category.abbreviation)
        if expert is None:
            res.skipped_no_expert += 1
            continue
        try:
            strip = main_strip_for_aux(det.box, scene.lam, (main_image.width, main_image.height), cfg.crossview.pad)
        except NoOverlap:
            res.skipped_outside += 1
            continue
        patch = main_image.crop(strip)
        offset = (int(math.floor(strip.x1)), int(math.floor(strip.y1)))
        ctx = PatchContext(scene.scene_id, strip, offset, det.category)
        try:
            verdict = classify_patch(expert, patch, ctx)
        except BackendFailure as exc:
            if exc.scene_id is None:
                raise BackendFailure(str(exc), scene_id=scene.scene_id) from exc
            raise
        if verdict.rejected:
            res.rejected += 1
            continue
        b = verdict.box
        try:
            box = clip_coords(
                b.x1 + offset[0], b.y1 + offset[1], b.x2 + offset[0], b.y2 + offset[1],
                main_image.width, main_image.height,
            )
        except NoOverlap:
            res.rejected += 1
            continue
        res.detections.append(Detection(box, verdict.category, det.score * verdict.score, Source.AUX_REFINED))
    return res


def gate_refined(refined: Iterable[Detection], fusion: FusionConfig) -> list[Detection]:
    """Confidence/category gate on refined auxiliary detections.

    A threshold of 1.0 admits nothing, so the output reduces to the main view.
    """
    t = fusion.conf_threshold
    if t >= 1.0:
        return []
    allowed = set(fusion.aux_categories)
    return [d for d in refined if d.score >= t and d.category.abbreviation in allowed]


def fuse(
    main_dets: Sequence[Detection],
    refined_aux: Sequence[Detection],
    fusion: FusionConfig | PipelineConfig,
) -> list[Detection]:
    """Union of main detections and gated refined auxiliary detections.

    Unless ``strict_union`` is set, cross-source duplicates are removed by a
    per-category greedy NMS at ``dedup_iou``.  Two main-view detections never
    suppress each other, so the main output survives intact when nothing is
    admitted from the auxiliary side.  On equal scores the main detection wins.
    """
    if isinstance(fusion, PipelineConfig):
        fusion = fusion.fusion
    gated = gate_refined(refined_aux, fusion)
    if fusion.strict_union:
        return canonical_sort([*main_dets, *gated])
    tagged = [(d, 0) for d in main_dets] + [(d, 1) for d in gated]
    tagged.sort(key=lambda t: (-t[0].score, t[1], t[0].sort_key()))
    kept: list[tuple[Detection, int]] = []
    for d, tag in tagged:
        dup = any(
            k.category == d.category and not (tag == 0 and ktag == 0) and iou(k.box, d.box) >= fusion.dedup_iou
            for k, ktag in kept
        )
        if not dup:
            kept.append((d, tag))
    return canonical_sort(d for d, _ in kept)


# --- orchestration ----------------------------------------------------------


def build_backends(cfg: PipelineConfig, ds: Dataset, base_dir: Path | None = None) -> Backends:
    """Instantiate the detector/expert backends named in ``cfg.backends`` (oracle by default)."""
    sections = cfg.backends
    main = make_detector(sections.get("main", {"kind": "oracle"}), ds, "main", cfg.saliency, cfg.crossview.min_overlap, base_dir)
    aux = make_detector(sections.get("aux", {"kind": "oracle"}), ds, "aux", cfg.saliency, cfg.crossview.min_overlap, base_dir)
    experts = make_registry(sections.get("experts", {"kind": "oracle"}), ds, cfg.fusion.aux_categories)
    return Backends(main, aux, experts)


@dataclass
class SceneResult:
    scene_id: str
    main: list[Detection]
    aux_raw: list[Detection]
    aux_merged: list[Detection]
    refined: list[Detection]
    fused: list[Detection]
    skipped_no_expert: int = 0
    rejected: int = 0


def run_scene_detailed(scene: PairedScene, cfg: PipelineConfig, backends: Backends) -> SceneResult:
    sid = scene.scene_id
    try:
        main_img = scene.load_main()
        aux_img = scene.load_aux()
    except OSError as exc:
        raise DatasetIOError(f"scene {sid}: cannot read images: {exc}") from exc
    try:
        main = canonical_sort(backends.main.detect(sid, main_img, scene.main_image_path))
        aux_raw = canonical_sort(backends.aux.detect(sid, aux_img, scene.aux_image_path))
    except BackendFailure as exc:
        if exc.scene_id is None:
            raise BackendFailure(str(exc), scene_id=sid) from exc
        raise
    except DualViewError as exc:
        if isinstance(exc, BackendFailure):
            raise
        raise BackendFailure(f"{type(exc).__name__}: {exc}", scene_id=sid) from exc
    merged = merge_boxes(aux_raw, cfg.merge.strategy, cfg.merge.iou_thresh)
    ref = refine_via_experts(scene, merged, backends.experts, cfg, main_img)
    refined = canonical_sort(ref.detections)
    fused = fuse(main, refined, cfg.fusion)
    return SceneResult(sid, main, aux_raw, merged, refined, fused, ref.skipped_no_expert, ref.rejected)


def run_scene(scene: PairedScene, cfg: PipelineConfig, backends: Backends) -> list[Detection]:
    return run_scene_detailed(scene, cfg, backends).fused


@dataclass
class RunResult:
    main: DetectionFile
    refined: DetectionFile
    fused: DetectionFile
    counts: dict[str, int] = field(default_factory=dict)


def run_dataset(ds: Dataset, cfg: PipelineConfig, backends: Backends, jobs: int = 1) -> RunResult:
    cfg.check_vocabulary(ds.vocabulary)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda s: run_scene_detailed(s, cfg, backends), ds.scenes))
    else:
        results = [run_scene_detailed(s, cfg, backends) for s in ds.scenes]
    out = RunResult(DetectionFile(), DetectionFile(), DetectionFile())
    counts: Counter[str] = Counter()
    for r in results:
        out.main.scenes[r.scene_id] = r.main
        out.refined.scenes[r.scene_id] = r.refined
        out.fused.scenes[r.scene_id] = r.fused
        counts["main"] += len(r.main)
        counts["aux_raw"] += len(r.aux_raw)
        counts["aux_merged"] += len(r.aux_merged)
        counts["refined"] += len(r.refined)
        counts["fused"] += len(r.fused)
        counts["skipped_no_expert"] += r.skipped_no_expert
        counts["expert_rejects"] += r.rejected
    out.counts = dict(counts)
    return out


def refuse(main: DetectionFile, refined: DetectionFile, fusion: FusionConfig) -> DetectionFile:
    """Re-run only the fusion step over cached per-scene outputs."""
    out = DetectionFile()
    for sid in main.scenes:
        out.scenes[sid] = fuse(main.scenes[sid], refined.get(sid), fusion)
    return out


# --- offline exports ------------------------------------------------------------


@dataclass
class CropSetSummary:
    per_category: dict[str, int]
    empty_categories: list[str]
    n_patches: int
    annotation_file: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_category": self.per_category,
            "empty_categories": self.empty_categories,
            "n_patches": self.n_patches,
            "annotation_file": self.annotation_file,
        }


def export_expert_crops(ds: Dataset, cats: Iterable[str], out: str | Path) -> CropSetSummary:
    """Write one main-view patch per ground-truth instance of ``cats``.

    Patches are the GT box expanded outward to whole pixels; the annotation
    file gives the GT box in patch-local coordinates.
    """
    cats = list(dict.fromkeys(cats))
    if not cats:
        raise InvalidValue("export_expert_crops needs at least one category")
    for c in cats:
        ds.vocabulary.get(c)
    out = Path(out)
    wanted = set(cats)
    per_cat = {c: 0 for c in cats}
    images, annotations = [], []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for scene in ds.scenes:
            targets = [(k, g) for k, g in enumerate(scene.main_gt) if g.category.abbreviation in wanted]
            if not targets:
                continue
            img = scene.load_main()
            for k, gt in targets:
                patch = img.crop(gt.box)
                ox, oy = math.floor(gt.box.x1), math.floor(gt.box.y1)
                abbr = gt.category.abbreviation
                rel = f"{abbr}/{scene.scene_id}_{k}.png"
                (out / abbr).mkdir(parents=True, exist_ok=True)
                save_grey(patch, out / rel)
                pid = len(images)
                images.append(
                    {
                        "id": pid,
                        "file_name": rel,
                        "width": patch.width,
                        "height": patch.height,
                        "scene_id": scene.scene_id,
                        "offset": [ox, oy],
                    }
                )
                local = gt.box.translate(-ox, -oy)
                annotations.append(
                    {"id": pid, "image_id": pid, "category_id": gt.category.id, "bbox": local.as_list()}
                )
                per_cat[abbr] += 1
        ann_path = out / "crops.json"
        write_json(
            ann_path,
            {
                "categories": [{"id": c.id, "abbreviation": c.abbreviation, "name": c.name} for c in ds.vocabulary],
                "images": images,
                "annotations": annotations,
            },
        )
    except OSError as exc:
        raise DatasetIOError(f"crop export to {out} failed: {exc}") from exc
    return CropSetSummary(per_cat, [c for c, n in per_cat.items() if n == 0], len(images), str(ann_path))


@dataclass
class PseudoLabelSummary:
    n_scenes: int
    salient_boxes: int
    emitted: int
    dropped_unmatched: int
    per_category: dict[str, int]
    annotation_file: str

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def build_aux_pseudolabels(ds: Dataset, cfg: PipelineConfig, out: str | Path) -> PseudoLabelSummary:
    """Salient auxiliary boxes labelled by correspondence, as a training annotation file."""
    out = Path(out)
    images, annotations = [], []
    per_cat: Counter[str] = Counter()
    n_salient = 0
    for scene in ds.scenes:
        aux = scene.load_aux()
        boxes = detect_salient(aux, cfg.saliency)
        n_salient += len(boxes)
        labeled = match_and_transfer(
            boxes, [(g.box, g.category) for g in scene.main_gt], scene.lam, cfg.crossview.min_overlap
        )
        images.append(
            {
                "id": scene.scene_id,
                "file_name": scene.aux_image_path.relative_to(ds.root).as_posix()
                if scene.aux_image_path.is_relative_to(ds.root)
                else str(scene.aux_image_path),
                "width": aux.width,
                "height": aux.height,
            }
        )
        for box, cat in labeled:
            annotations.append(
                {"id": len(annotations), "image_id": scene.scene_id, "category_id": cat.id, "bbox": box.as_list()}
            )
            per_cat[cat.abbreviation] += 1
    try:
        ann_path = out / "aux_pseudolabels.json" if out.suffix != ".json" else out
        write_json(
            ann_path,
            {
                "root": str(ds.root),
                "categories": [{"id": c.id, "abbreviation": c.abbreviation, "name": c.name} for c in ds.vocabulary],
                "images": images,
                "annotations": annotations,
            },
        )
    except OSError as exc:
        raise DatasetIOError(f"pseudo-label export to {out} failed: {exc}") from exc
    return PseudoLabelSummary(
        n_scenes=len(ds.scenes),
        salient_boxes=n_salient,
        emitted=len(annotations),
        dropped_unmatched=n_salient - len(annotations),
        per_category={c.abbreviation: per_cat[c.abbreviation] for c in ds.vocabulary},
        annotation_file=str(ann_path),
    )

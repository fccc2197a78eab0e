"""Paired-view dataset layout, validation, statistics and detection exchange files.

On-disk layout of a dataset root::

    manifest.json              {"schema_version", "lambda", "splits": {name: annotation path}, ...}
    annotations/<split>.json   COCO-style: categories[], images[], annotations[]
    images/...                 greyscale (or colour) PNGs for both views

Every ``images[]`` entry names its main view in ``file_name`` and its partner
in ``aux_image``.  ``bbox`` is ``[x1, y1, x2, y2]`` in main-view pixels.
Lambda is global (manifest, or the annotation file's top level) and may be
overridden per image.  There is no auxiliary-view ground truth.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._io import atomic_write_text, dumps, read_json, write_json
from .core import (
    BBox,
    Category,
    Detection,
    GreyImage,
    LambdaFactor,
    Source,
    Vocabulary,
    canonical_sort,
    clip_box,
    load_grey,
)
from .errors import (
    BadAnnotation,
    BadManifest,
    DatasetIOError,
    InvalidValue,
    MissingPair,
    NoOverlap,
    ParseError,
    UnknownCategory,
    UnknownScene,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

# instance-area histogram edges, px^2
AREA_BIN_EDGES: tuple[float, ...] = (0, 1e3, 1e4, 5e4, 1e5, 5e5, 1.5e6, math.inf)


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    category: Category
    occluded_main: bool = False


@dataclass(frozen=True)
class PairedScene:
    scene_id: str
    main_image_path: Path
    aux_image_path: Path
    main_gt: tuple[GroundTruth, ...]
    lam: LambdaFactor
    main_size: tuple[int, int]
    aux_size: tuple[int, int]

    def load_main(self) -> GreyImage:
        return load_grey(self.main_image_path)

    def load_aux(self) -> GreyImage:
        return load_grey(self.aux_image_path)


@dataclass(frozen=True)
class Dataset:
    root: Path
    vocabulary: Vocabulary
    scenes: tuple[PairedScene, ...]
    split: str
    lam: LambdaFactor | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise BadManifest(f"duplicate scene ids: {dupes[:5]}")
        object.__setattr__(self, "_index", {s.scene_id: s for s in self.scenes})

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[PairedScene]:
        return iter(self.scenes)

    def scene(self, scene_id: str) -> PairedScene:
        try:
            return self._index[scene_id]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownScene(f"scene {scene_id!r} not in dataset") from None

    def __contains__(self, scene_id: object) -> bool:
        return scene_id in self._index  # type: ignore[attr-defined]

    @property
    def scene_ids(self) -> list[str]:
        return [s.scene_id for s in self.scenes]


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise BadAnnotation(f"cannot decode image {path}: {exc}") from exc


def _read_manifest(root: Path) -> dict:
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise BadManifest(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = read_json(mpath)
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{mpath}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("splits"), dict) or not manifest["splits"]:
        raise BadManifest(f"{mpath}: 'splits' must map split names to annotation files")
    version = manifest.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise BadManifest(f"{mpath}: unsupported schema_version {version}")
    return manifest


def _parse_vocabulary(raw: Any, where: str) -> Vocabulary:
    if not isinstance(raw, list) or not raw:
        raise BadManifest(f"{where}: 'categories' must be a non-empty list")
    try:
        cats = [
            Category(int(c["id"]), str(c.get("abbreviation") or c["name"]), str(c.get("name", "")))
            for c in raw
        ]
        return Vocabulary(cats)
    except (KeyError, TypeError, ValueError, InvalidValue) as exc:
        raise BadManifest(f"{where}: bad categories ({exc})") from exc


def load_dataset(root: str | Path, split: str | None = None, jobs: int = 1) -> Dataset:
    """Load and eagerly validate one split of a paired-view dataset.

    Every image header is opened to confirm it decodes and matches the
    declared size; every annotation is bounds- and vocabulary-checked.
    """
    root = Path(root)
    manifest = _read_manifest(root)
    splits = manifest["splits"]
    if split is None:
        split = manifest.get("default_split") or next(iter(splits))
    if split not in splits:
        raise BadManifest(f"split {split!r} not in manifest (have {sorted(splits)})")
    ann_path = root / splits[split]
    if not ann_path.is_file():
        raise BadManifest(f"annotation file {ann_path} missing")
    try:
        coco = read_json(ann_path)
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{ann_path}: invalid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(coco.get(key), list):
            raise BadManifest(f"{ann_path}: missing list '{key}'")

    vocab = _parse_vocabulary(coco["categories"], str(ann_path))
    global_lam_raw = coco.get("lambda", manifest.get("lambda"))
    global_lam = None
    if global_lam_raw is not None:
        try:
            global_lam = LambdaFactor(global_lam_raw)
        except (InvalidValue, TypeError, ValueError) as exc:
            raise BadManifest(f"invalid lambda {global_lam_raw!r}: {exc}") from exc

    images = coco["images"]
    for i, img in enumerate(images):
        for key in ("id", "file_name", "aux_image"):
            if key not in img:
                raise BadManifest(f"{ann_path}: images[{i}] lacks '{key}'")

    def check_pair(img: dict) -> tuple[tuple[int, int], tuple[int, int]]:
        main_p, aux_p = root / img["file_name"], root / img["aux_image"]
        missing = [str(p) for p in (main_p, aux_p) if not p.is_file()]
        if missing:
            raise MissingPair(f"scene {img['id']!r}: missing view image(s) {missing}")
        msize, asize = _image_size(main_p), _image_size(aux_p)
        for key, actual in (("width", msize[0]), ("height", msize[1])):
            if key in img and int(img[key]) != actual:
                raise BadAnnotation(f"scene {img['id']!r}: declared {key} {img[key]} != image {actual}")
        for key, actual in (("aux_width", asize[0]), ("aux_height", asize[1])):
            if key in img and int(img[key]) != actual:
                raise BadAnnotation(f"scene {img['id']!r}: declared {key} {img[key]} != image {actual}")
        return msize, asize

    if jobs > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            sizes = list(pool.map(check_pair, images))
    else:
        sizes = [check_pair(img) for img in images]

    by_image: dict[Any, list[dict]] = {img["id"]: [] for img in images}
    for j, ann in enumerate(coco["annotations"]):
        try:
            by_image[ann["image_id"]].append(ann)
        except KeyError:
            raise BadAnnotation(f"annotations[{j}] references unknown image {ann.get('image_id')!r}") from None

    scenes = []
    for img, (msize, asize) in zip(images, sizes):
        sid = str(img["id"])
        lam_raw = img.get("lambda")
        if lam_raw is not None:
            try:
                lam = LambdaFactor(lam_raw)
            except (InvalidValue, TypeError, ValueError) as exc:
                raise BadManifest(f"scene {sid!r}: invalid lambda {lam_raw!r}") from exc
        elif global_lam is not None:
            lam = global_lam
        else:
            raise BadManifest(
                f"scene {sid!r}: no lambda in manifest or annotation file; "
                "estimate it with `dualview-fuse estimate-lambda` and record it"
            )
        gts = []
        for ann in by_image[img["id"]]:
            try:
                cat = vocab.get(int(ann["category_id"]))
            except (UnknownCategory, KeyError, TypeError, ValueError):
                raise BadAnnotation(
                    f"scene {sid!r}: annotation {ann.get('id')!r} has unknown category {ann.get('category_id')!r}"
                ) from None
            try:
                raw = BBox.from_seq(ann["bbox"])
                box = clip_box(raw, msize[0], msize[1])
                if box != raw:
                    log.warning("scene %s: annotation %s clipped to the image", sid, ann.get("id"))
            except (KeyError, TypeError, InvalidValue) as exc:
                raise BadAnnotation(f"scene {sid!r}: annotation {ann.get('id')!r}: {exc}") from None
            except NoOverlap:
                raise BadAnnotation(
                    f"scene {sid!r}: annotation {ann.get('id')!r} box {ann['bbox']} outside image {msize}"
                ) from None
            gts.append(GroundTruth(box, cat, bool(ann.get("occluded_main", False))))
        scenes.append(
            PairedScene(
                scene_id=sid,
                main_image_path=root / img["file_name"],
                aux_image_path=root / img["aux_image"],
                main_gt=tuple(gts),
                lam=lam,
                main_size=(int(msize[0]), int(msize[1])),
                aux_size=(int(asize[0]), int(asize[1])),
            )
        )
    extra = {k: v for k, v in manifest.items() if k not in ("schema_version", "splits", "lambda")}
    return Dataset(root=root, vocabulary=vocab, scenes=tuple(scenes), split=split, lam=global_lam, extra=extra)


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def dataset_to_coco(ds: Dataset, root: Path) -> dict:
    images, annotations = [], []
    ann_id = 0
    for s in ds.scenes:
        entry: dict[str, Any] = {
            "id": s.scene_id,
            "file_name": _rel(s.main_image_path, root),
            "aux_image": _rel(s.aux_image_path, root),
            "width": s.main_size[0],
            "height": s.main_size[1],
            "aux_width": s.aux_size[0],
            "aux_height": s.aux_size[1],
        }
        if ds.lam is None or s.lam != ds.lam:
            entry["lambda"] = s.lam.value
        images.append(entry)
        for gt in s.main_gt:
            rec = {
                "id": ann_id,
                "image_id": s.scene_id,
                "category_id": gt.category.id,
                "bbox": gt.box.as_list(),
                "area": gt.box.area,
            }
            if gt.occluded_main:
                rec["occluded_main"] = True
            annotations.append(rec)
            ann_id += 1
    return {
        "categories": [{"id": c.id, "abbreviation": c.abbreviation, "name": c.name} for c in ds.vocabulary],
        "images": images,
        "annotations": annotations,
        "lambda": ds.lam.value if ds.lam is not None else None,
    }


def write_dataset(ds: Dataset, root: str | Path, extra: Mapping[str, Any] | None = None) -> Path:
    """Write manifest + annotation file; images outside ``root`` are copied in."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scenes = []
    for s in ds.scenes:
        paths = []
        for p, sub in ((s.main_image_path, "main"), (s.aux_image_path, "aux")):
            try:
                p.resolve().relative_to(root.resolve())
                paths.append(root / p.resolve().relative_to(root.resolve()))
            except ValueError:
                dest = root / "images" / sub / p.name
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(p, dest)
                paths.append(dest)
        scenes.append(
            PairedScene(s.scene_id, paths[0], paths[1], s.main_gt, s.lam, s.main_size, s.aux_size)
        )
    ds = Dataset(root, ds.vocabulary, tuple(scenes), ds.split, ds.lam)
    ann_rel = f"annotations/{ds.split}.json"
    write_json(root / ann_rel, dataset_to_coco(ds, root))
    manifest: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "lambda": ds.lam.value if ds.lam is not None else None,
        "splits": {ds.split: ann_rel},
        "default_split": ds.split,
    }
    if extra:
        manifest.update(extra)
    mpath = root / MANIFEST_NAME
    if mpath.is_file():
        old = read_json(mpath)
        old_splits = old.get("splits", {})
        old_splits.update(manifest["splits"])
        manifest["splits"] = old_splits
    write_json(mpath, manifest)
    return root


@dataclass
class StatsReport:
    split: str
    n_scenes: int
    n_instances: int
    instances_per_image: float
    per_category: dict[str, int]
    area_histogram: list[dict[str, Any]]
    zero_instance_categories: list[str]
    empty_scenes: list[str]
    occluded_main_per_category: dict[str, int]
    flags: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "n_scenes": self.n_scenes,
            "n_instances": self.n_instances,
            "instances_per_image": self.instances_per_image,
            "per_category": self.per_category,
            "area_histogram": self.area_histogram,
            "zero_instance_categories": self.zero_instance_categories,
            "empty_scenes": self.empty_scenes,
            "occluded_main_per_category": self.occluded_main_per_category,
            "flags": self.flags,
        }


def validate_stats(ds: Dataset) -> StatsReport:
    per_cat = {c.abbreviation: 0 for c in ds.vocabulary}
    occluded = {c.abbreviation: 0 for c in ds.vocabulary}
    areas = []
    empty = []
    for s in ds.scenes:
        if not s.main_gt:
            empty.append(s.scene_id)
        for gt in s.main_gt:
            per_cat[gt.category.abbreviation] += 1
            occluded[gt.category.abbreviation] += int(gt.occluded_main)
            areas.append(gt.box.area)
    n_inst = sum(per_cat.values())
    counts, _ = np.histogram(np.asarray(areas, dtype=float), bins=np.asarray(AREA_BIN_EDGES))
    hist = [
        {"lo": lo, "hi": (hi if math.isfinite(hi) else None), "count": int(n)}
        for lo, hi, n in zip(AREA_BIN_EDGES[:-1], AREA_BIN_EDGES[1:], counts)
    ]
    zero = [a for a, n in per_cat.items() if n == 0]
    flags = []
    if not ds.scenes:
        flags.append("empty_split")
    if zero:
        flags.append("zero_instance_categories")
    if empty:
        flags.append("scenes_without_annotations")
    return StatsReport(
        split=ds.split,
        n_scenes=len(ds.scenes),
        n_instances=n_inst,
        instances_per_image=(n_inst / len(ds.scenes)) if ds.scenes else 0.0,
        per_category=per_cat,
        area_histogram=hist,
        zero_instance_categories=zero,
        empty_scenes=empty,
        occluded_main_per_category=occluded,
        flags=flags,
    )


# --- detection exchange (JSON Lines) -------------------------------------


@dataclass
class DetectionFile:
    """Per-scene detection lists.  Scenes with an empty list are kept."""

    scenes: dict[str, list[Detection]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.scenes.values())

    def get(self, scene_id: str) -> list[Detection]:
        return self.scenes.get(scene_id, [])

    def add(self, scene_id: str, dets: Iterable[Detection]) -> None:
        self.scenes.setdefault(scene_id, []).extend(dets)

    def canonical(self) -> "DetectionFile":
        return DetectionFile({sid: canonical_sort(self.scenes[sid]) for sid in sorted(self.scenes)})

    def records(self) -> Iterator[tuple[str, Detection]]:
        for sid, dets in self.scenes.items():
            for d in dets:
                yield sid, d


def detection_to_record(scene_id: str, d: Detection) -> dict[str, Any]:
    return {
        "scene_id": scene_id,
        "category": d.category.abbreviation,
        "bbox": d.box.as_list(),
        "score": d.score,
        "source": d.source.value,
    }


def format_detections(dets: DetectionFile) -> str:
    lines = []
    for sid, items in dets.scenes.items():
        if not items:
            # coverage marker: scene processed, nothing detected
            lines.append(json.dumps({"scene_id": sid}, sort_keys=True))
        for d in items:
            lines.append(json.dumps(detection_to_record(sid, d), sort_keys=True))
    return "".join(line + "\n" for line in lines)


def write_detections(dets: DetectionFile, path: str | Path) -> None:
    atomic_write_text(path, format_detections(dets))


def parse_detection_record(
    rec: Any, vocab: Vocabulary, line: int | None = None, path: str | None = None
) -> tuple[str, Detection | None]:
    if not isinstance(rec, dict) or not isinstance(rec.get("scene_id"), str):
        raise ParseError("record must be an object with a string 'scene_id'", line, path)
    sid = rec["scene_id"]
    if "bbox" not in rec and "category" not in rec:
        return sid, None
    try:
        cat = vocab.get(rec["category"])
    except UnknownCategory as exc:
        raise UnknownCategory(f"{path or '<detections>'}:{line}: {exc}") from None
    except KeyError:
        raise ParseError("missing 'category'", line, path) from None
    try:
        box = BBox.from_seq(rec["bbox"])
        score = rec["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise InvalidValue(f"score must be a number, got {score!r}")
        det = Detection(box, cat, float(score), Source(rec.get("source", Source.MAIN_VIEW.value)))
    except KeyError as exc:
        raise ParseError(f"missing field {exc}", line, path) from None
    except (InvalidValue, TypeError, ValueError) as exc:
        raise ParseError(str(exc), line, path) from None
    return sid, det


def parse_detections(
    text: str,
    vocab: Vocabulary | None = None,
    dataset: Dataset | None = None,
    path: str | None = None,
) -> DetectionFile:
    if vocab is None:
        vocab = dataset.vocabulary if dataset is not None else Vocabulary.default()
    out = DetectionFile()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno, path) from None
        sid, det = parse_detection_record(rec, vocab, lineno, path)
        if dataset is not None and sid not in dataset:
            raise UnknownScene(f"{path or '<detections>'}:{lineno}: scene {sid!r} not in dataset")
        bucket = out.scenes.setdefault(sid, [])
        if det is not None:
            bucket.append(det)
    return out


def read_detections(
    path: str | Path, vocab: Vocabulary | None = None, dataset: Dataset | None = None
) -> DetectionFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read detections {path}: {exc}") from exc
    return parse_detections(text, vocab=vocab, dataset=dataset, path=str(path))


def write_stats(report: StatsReport) -> str:
    return dumps(report.to_dict())

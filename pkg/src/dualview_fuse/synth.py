"""Synthetic paired-view scenes with exact lambda geometry and main-view occlusion.

Objects are flat attenuation shapes (rectangles or ellipses) composited
multiplicatively over a faint "bag".  Auxiliary abscissae are the main
abscissae divided by lambda, exactly; ordinates and heights in the auxiliary
view are drawn independently.  An occluded object stays in the main-view
ground truth but is not rendered in the main image.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ._io import read_json, write_json
from .core import BBox, GreyImage, LambdaFactor, Vocabulary, save_grey
from .dataset_io import Dataset, GroundTruth, PairedScene, load_dataset, write_dataset
from .errors import DatasetIOError, InvalidValue

ELLIPSE_CATEGORIES = frozenset({"OL", "GL", "BL", "CO", "NL", "UM", "CG"})
TRUTH_FILE = "synth_truth.json"


@dataclass(frozen=True)
class ShapeTemplate:
    shape: str = "rect"
    min_size: int = 30
    max_size: int = 80
    intensity: tuple[float, float] = (0.1, 0.6)

    def __post_init__(self) -> None:
        if self.shape not in ("rect", "ellipse"):
            raise InvalidValue(f"shape must be 'rect' or 'ellipse', got {self.shape!r}")
        if not 1 <= self.min_size <= self.max_size:
            raise InvalidValue("need 1 <= min_size <= max_size")
        lo, hi = self.intensity
        if not 0.0 <= lo <= hi <= 0.6:
            raise InvalidValue("object intensity must lie in [0, 0.6]")
        object.__setattr__(self, "intensity", (float(lo), float(hi)))


def default_templates(vocab: Vocabulary) -> dict[str, ShapeTemplate]:
    out = {}
    for c in vocab:
        a = c.abbreviation
        if a == "LA":
            out[a] = ShapeTemplate("rect", 60, 110, (0.05, 0.4))
        elif a in ELLIPSE_CATEGORIES:
            out[a] = ShapeTemplate("ellipse", 32, 80, (0.1, 0.6))
        else:
            out[a] = ShapeTemplate("rect", 30, 80, (0.1, 0.6))
    return out


@dataclass(frozen=True)
class SceneSpec:
    main_size: tuple[int, int] = (480, 320)
    aux_height: int = 320
    lam: float = 1.25
    min_objects: int = 1
    max_objects: int = 4
    always_include: tuple[str, ...] = ()
    category_weights: Mapping[str, float] | None = None
    templates: Mapping[str, ShapeTemplate] | None = None
    occlusion: Mapping[str, float] = field(default_factory=dict)
    noise: float = 0.02
    bag_intensity: float = 0.88
    gap: int = 8
    x_disjoint: bool = True
    rng_seed: int = 0
    split: str = "test"
    categories: tuple[str, ...] | None = None  # None = default 12-class vocabulary

    def __post_init__(self) -> None:
        LambdaFactor(self.lam)
        w, h = self.main_size
        if w < 8 or h < 8 or self.aux_height < 8:
            raise InvalidValue("images must be at least 8x8")
        if abs(self.aux_width * self.lam - w) > self.lam:
            raise InvalidValue("aux width inconsistent with lambda")
        if not 0 <= self.min_objects <= self.max_objects:
            raise InvalidValue("need 0 <= min_objects <= max_objects")
        for k, p in self.occlusion.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidValue(f"occlusion probability for {k} must be in [0, 1]")
        if self.noise < 0 or not 0.0 < self.bag_intensity <= 1.0:
            raise InvalidValue("noise must be >= 0 and bag_intensity in (0, 1]")
        object.__setattr__(self, "always_include", tuple(self.always_include))
        object.__setattr__(self, "main_size", (int(w), int(h)))

    @property
    def aux_width(self) -> int:
        return int(round(self.main_size[0] / self.lam))

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.default() if self.categories is None else Vocabulary.from_abbreviations(self.categories)

    def resolved_templates(self) -> dict[str, ShapeTemplate]:
        base = default_templates(self.vocabulary)
        if self.templates:
            base.update(self.templates)
        return base

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["main_size"] = list(self.main_size)
        d["always_include"] = list(self.always_include)
        d["occlusion"] = dict(self.occlusion)
        d["category_weights"] = dict(self.category_weights) if self.category_weights else None
        d["templates"] = (
            {k: {**asdict(t), "intensity": list(t.intensity)} for k, t in self.templates.items()}
            if self.templates
            else None
        )
        d["categories"] = list(self.categories) if self.categories is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SceneSpec":
        d = dict(d)
        if "main_size" in d:
            d["main_size"] = tuple(d["main_size"])
        if d.get("templates"):
            d["templates"] = {
                k: ShapeTemplate(v["shape"], v["min_size"], v["max_size"], tuple(v["intensity"]))
                for k, v in d["templates"].items()
            }
        if d.get("categories") is not None:
            d["categories"] = tuple(d["categories"])
        if "always_include" in d:
            d["always_include"] = tuple(d["always_include"])
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class SynthObject:
    category: str
    main_box: BBox
    aux_box: BBox
    occluded_main: bool
    shape: str
    intensity: float


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _rect_coverage(box: BBox, width: int, height: int) -> np.ndarray:
    return np.outer(_coverage_1d(box.y1, box.y2, height), _coverage_1d(box.x1, box.x2, width))


def _ellipse_coverage(box: BBox, width: int, height: int, ss: int = 4) -> np.ndarray:
    cov = np.zeros((height, width))
    c0, c1 = int(math.floor(box.x1)), min(int(math.ceil(box.x2)), width)
    r0, r1 = int(math.floor(box.y1)), min(int(math.ceil(box.y2)), height)
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    ax, ay = box.width / 2, box.height / 2
    sub = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(r0, r1)[:, None] + sub[None, :]).ravel()
    inside = ((xs[None, :] - cx) / ax) ** 2 + ((ys[:, None] - cy) / ay) ** 2 <= 1.0
    block = inside.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = block
    return cov


def render(
    width: int,
    height: int,
    objects: Sequence[tuple[BBox, str, float]],
    rng: np.random.Generator,
    noise: float,
    bag_intensity: float,
) -> GreyImage:
    img = np.ones((height, width))
    bag = BBox(0.03 * width, 0.04 * height, 0.97 * width, 0.96 * height)
    img *= 1.0 - _rect_coverage(bag, width, height) * (1.0 - bag_intensity)
    for box, shape, intensity in objects:
        cov = _rect_coverage(box, width, height) if shape == "rect" else _ellipse_coverage(box, width, height)
        img *= 1.0 - cov * (1.0 - intensity)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return GreyImage(np.clip(img, 0.0, 1.0))


def _separated(a: BBox, b: BBox, gap: float) -> bool:
    return a.x2 + gap <= b.x1 or b.x2 + gap <= a.x1 or a.y2 + gap <= b.y1 or b.y2 + gap <= a.y1


def _x_separated(a: BBox, b: BBox, gap: float) -> bool:
    return a.x2 + gap <= b.x1 or b.x2 + gap <= a.x1


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def layout_scene(spec: SceneSpec, index: int) -> list[SynthObject]:
    rng = scene_rng(spec.rng_seed, index)
    vocab = spec.vocabulary
    templates = spec.resolved_templates()
    abbrs = vocab.abbreviations
    weights = np.array([float((spec.category_weights or {}).get(a, 1.0)) for a in abbrs])
    if weights.sum() <= 0:
        raise InvalidValue("category weights sum to zero")
    weights = weights / weights.sum()
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cats = list(spec.always_include)
    for c in cats:
        vocab.get(c)
    while len(cats) < n:
        cats.append(abbrs[int(rng.choice(len(abbrs), p=weights))])

    W, H = spec.main_size
    AW, AH = spec.aux_width, spec.aux_height
    lam = spec.lam
    # keep objects on the bag, away from its edges
    mx0, mx1 = int(math.ceil(0.05 * W)), int(math.floor(0.95 * W))
    my0, my1 = int(math.ceil(0.06 * H)), int(math.floor(0.94 * H))
    ay0, ay1 = int(math.ceil(0.06 * AH)), int(math.floor(0.94 * AH))
    gap_main = spec.gap * lam
    placed: list[SynthObject] = []
    for abbr in cats:
        t = templates[abbr]
        w = int(rng.integers(t.min_size, t.max_size + 1))
        h = int(rng.integers(t.min_size, t.max_size + 1))
        ah = int(rng.integers(t.min_size, t.max_size + 1))
        intensity = float(rng.uniform(*t.intensity))
        occluded = bool(rng.random() < spec.occlusion.get(abbr, 0.0))
        w = min(w, mx1 - mx0 - 1)
        h, ah = min(h, my1 - my0 - 1), min(ah, ay1 - ay0 - 1)
        obj = None
        for _ in range(60):
            x1 = int(rng.integers(mx0, mx1 - w + 1))
            y1 = int(rng.integers(my0, my1 - h + 1))
            ay = int(rng.integers(ay0, ay1 - ah + 1))
            main_box = BBox(x1, y1, x1 + w, y1 + h)
            aux_box = BBox(x1 / lam, ay, (x1 + w) / lam, ay + ah)
            if spec.x_disjoint:
                ok = all(_x_separated(main_box, p.main_box, gap_main) for p in placed)
            else:
                ok = all(
                    _separated(main_box, p.main_box, gap_main) and _separated(aux_box, p.aux_box, spec.gap)
                    for p in placed
                )
            if ok:
                obj = SynthObject(abbr, main_box, aux_box, occluded, t.shape, intensity)
                break
        if obj is not None:
            placed.append(obj)
    return placed


def generate_scene(spec: SceneSpec, index: int, root: str | Path) -> tuple[PairedScene, list[SynthObject]]:
    """Lay out, render and write one scene under ``root/images``."""
    root = Path(root)
    objects = layout_scene(spec, index)
    # noise streams are separate from layout so layout edits do not shift noise
    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(spec.rng_seed), int(index), 1])))
    W, H = spec.main_size
    main_img = render(
        W, H,
        [(o.main_box, o.shape, o.intensity) for o in objects if not o.occluded_main],
        noise_rng, spec.noise, spec.bag_intensity,
    )
    aux_img = render(
        spec.aux_width, spec.aux_height,
        [(o.aux_box, o.shape, o.intensity) for o in objects],
        noise_rng, spec.noise, spec.bag_intensity,
    )
    sid = f"scene_{index:05d}"
    main_p = root / "images" / "main" / f"{sid}.png"
    aux_p = root / "images" / "aux" / f"{sid}.png"
    try:
        main_p.parent.mkdir(parents=True, exist_ok=True)
        aux_p.parent.mkdir(parents=True, exist_ok=True)
        save_grey(main_img, main_p)
        save_grey(aux_img, aux_p)
    except OSError as exc:
        raise DatasetIOError(f"cannot write scene {sid}: {exc}") from exc
    vocab = spec.vocabulary
    gts = tuple(GroundTruth(o.main_box, vocab.get(o.category), o.occluded_main) for o in objects)
    scene = PairedScene(
        sid, main_p, aux_p, gts, LambdaFactor(spec.lam), (W, H), (spec.aux_width, spec.aux_height)
    )
    return scene, objects


def generate_dataset(spec: SceneSpec, n_scenes: int, root: str | Path, jobs: int = 1) -> Dataset:
    """Write a complete dataset root and return it as loaded from disk."""
    if n_scenes < 1:
        raise InvalidValue("n_scenes must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda i: generate_scene(spec, i, root), range(n_scenes)))
    else:
        results = [generate_scene(spec, i, root) for i in range(n_scenes)]
    vocab = spec.vocabulary
    occluded = {a: 0 for a in vocab.abbreviations}
    scenes_with_occluded = {a: 0 for a in vocab.abbreviations}
    truth = {}
    for scene, objects in results:
        seen = set()
        for o in objects:
            if o.occluded_main:
                occluded[o.category] += 1
                seen.add(o.category)
        for a in seen:
            scenes_with_occluded[a] += 1
        truth[scene.scene_id] = [
            {
                "category": o.category,
                "main_bbox": o.main_box.as_list(),
                "aux_bbox": o.aux_box.as_list(),
                "occluded_main": o.occluded_main,
                "shape": o.shape,
            }
            for o in objects
        ]
    ds = Dataset(root, vocab, tuple(s for s, _ in results), spec.split, LambdaFactor(spec.lam))
    write_json(root / TRUTH_FILE, truth)
    write_dataset(
        ds,
        root,
        extra={
            "generator": "dualview_fuse.synth",
            "synth": {
                "spec": spec.to_dict(),
                "n_scenes": n_scenes,
                "occluded_instances": occluded,
                "scenes_with_occluded": scenes_with_occluded,
                "truth_file": TRUTH_FILE,
            },
        },
    )
    return load_dataset(root, spec.split)


def load_truth(root: str | Path) -> dict[str, list[SynthObject]]:
    """Generator-side truth, including auxiliary boxes that the dataset omits."""
    raw = read_json(Path(root) / TRUTH_FILE)
    return {
        sid: [
            SynthObject(
                o["category"], BBox.from_seq(o["main_bbox"]), BBox.from_seq(o["aux_bbox"]),
                bool(o["occluded_main"]), o.get("shape", "rect"), 0.0,
            )
            for o in objs
        ]
        for sid, objs in raw.items()
    }


def occlusion_benchmark_spec(seed: int = 2024, occlusion: float = 0.5) -> SceneSpec:
    """Every scene carries one UM; UMs are hidden from the main view with ``occlusion`` probability."""
    return SceneSpec(always_include=("UM",), occlusion={"UM": occlusion}, rng_seed=seed)

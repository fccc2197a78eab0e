"""Detector and expert backends: external processes, precomputed files, oracles.

External wire protocol
----------------------
Detector: the command template must contain ``{request}``; it is replaced by
the path of a JSON file ``{"scenes": [{"scene_id": ..., "image": ...}]}``.
The process answers on stdout with detection JSON Lines (the same schema as
detection files).  Expert: ``{request}`` names a JSON file
``{"patch": ..., "scene_id": ..., "category": ..., "offset": [x, y]}`` and the
process prints one JSON object ``{"category", "score", "bbox"}`` with the box
in patch-local pixels; ``score == 0`` is a reject.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shlex
import subprocess
import tempfile
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .core import BBox, Category, Detection, GreyImage, Source, Vocabulary, clip_coords, save_grey
from .crossview import match_and_transfer
from .dataset_io import Dataset, DetectionFile, parse_detection_record, read_detections
from .errors import BackendFailure, DualViewError, InvalidValue, MissingScene, NoOverlap
from .saliency import SaliencyParams, detect_salient

log = logging.getLogger(__name__)


def scene_rng(seed: int, scene_id: str, stream: str) -> np.random.Generator:
    """Generator keyed on (seed, scene, stream); independent of call order."""
    digest = hashlib.sha256(f"{stream}\x00{scene_id}".encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *words])))


@dataclass(frozen=True)
class ScoreLaw:
    """Scores the oracle assigns: ``hit`` for true objects, ``false`` for spurious ones.

    ``jitter`` is the std-dev of a half-normal deduction applied to hits.
    """

    hit: float = 1.0
    false: float = 0.3
    jitter: float = 0.0

    def __post_init__(self) -> None:
        for name in ("hit", "false"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidValue(f"score_law.{name} must be in [0, 1]")
        if self.jitter < 0:
            raise InvalidValue("score_law.jitter must be >= 0")

    def hit_score(self, rng: np.random.Generator) -> float:
        z = abs(float(rng.normal()))
        return float(min(1.0, max(0.0, self.hit - self.jitter * z)))


@dataclass(frozen=True)
class OracleSpec:
    miss_rate_main: float = 0.0
    loc_noise: float = 0.0
    score_law: ScoreLaw = field(default_factory=ScoreLaw)
    rng_seed: int = 0
    false_positives_per_scene: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.miss_rate_main <= 1.0:
            raise InvalidValue("miss_rate_main must be a probability")
        if self.loc_noise < 0 or self.false_positives_per_scene < 0:
            raise InvalidValue("loc_noise and false_positives_per_scene must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OracleSpec":
        law = d.get("score_law", {})
        return cls(
            miss_rate_main=float(d.get("miss_rate_main", 0.0)),
            loc_noise=float(d.get("loc_noise", 0.0)),
            score_law=ScoreLaw(**law) if isinstance(law, Mapping) else ScoreLaw(),
            rng_seed=int(d.get("seed", d.get("rng_seed", 0))),
            false_positives_per_scene=float(d.get("false_positives_per_scene", 0.0)),
        )


class DetectorBackend(Protocol):
    max_parallelism: int | None

    def detect(self, scene_id: str, image: GreyImage, image_path: Path | None = None) -> list[Detection]: ...

    def identity(self) -> dict[str, Any]: ...


def _perturb(box: BBox, sigma: float, rng: np.random.Generator, width: int, height: int) -> BBox | None:
    noise = rng.normal(0.0, 1.0, size=4) * sigma
    if sigma == 0:
        return box
    x1, y1, x2, y2 = (v + float(n) for v, n in zip(box.as_list(), noise))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        x2, y2 = max(x2, x1 + 1.0), max(y2, y1 + 1.0)
    try:
        return clip_coords(x1, y1, x2, y2, width, height)
    except NoOverlap:
        return None


def _spurious(
    rng: np.random.Generator, spec: OracleSpec, vocab_cats: Sequence[Category], width: int, height: int
) -> list[tuple[BBox, Category]]:
    n = int(rng.poisson(spec.false_positives_per_scene)) if spec.false_positives_per_scene > 0 else 0
    out = []
    for _ in range(n):
        w = float(rng.uniform(0.05, 0.25)) * width
        h = float(rng.uniform(0.05, 0.25)) * height
        x = float(rng.uniform(0, max(width - w, 1.0)))
        y = float(rng.uniform(0, max(height - h, 1.0)))
        cat = vocab_cats[int(rng.integers(len(vocab_cats)))]
        out.append((clip_coords(x, y, x + w, y + h, width, height), cat))
    return out


class OracleMainDetector:
    """Main-view stand-in: ground truth, minus missed occluded objects, plus noise."""

    kind = "oracle"

    def __init__(self, dataset: Dataset, spec: OracleSpec | None = None, max_parallelism: int | None = None):
        self.dataset = dataset
        self.spec = spec or OracleSpec()
        self.max_parallelism = max_parallelism

    def identity(self) -> dict[str, Any]:
        return {"kind": self.kind, "view": "main", "spec": asdict(self.spec)}

    def detect(self, scene_id: str, image: GreyImage, image_path: Path | None = None) -> list[Detection]:
        scene = self.dataset.scene(scene_id)
        spec = self.spec
        rng = scene_rng(spec.rng_seed, scene_id, "main")
        out = []
        for gt in scene.main_gt:
            # fixed draw pattern per object keeps streams aligned across specs
            u = float(rng.random())
            box = _perturb(gt.box, spec.loc_noise, rng, image.width, image.height)
            score = spec.score_law.hit_score(rng)
            if gt.occluded_main and u < spec.miss_rate_main:
                continue
            if box is not None:
                out.append(Detection(box, gt.category, score, Source.ORACLE))
        for box, cat in _spurious(rng, spec, list(self.dataset.vocabulary), image.width, image.height):
            out.append(Detection(box, cat, spec.score_law.false, Source.ORACLE))
        return out


class OracleAuxDetector:
    """Auxiliary-view stand-in for a detector trained on transferred pseudo-labels.

    Runs grey-map saliency on the auxiliary image and labels each salient box
    through the lambda correspondence with main-view ground truth.
    """

    kind = "oracle"

    def __init__(
        self,
        dataset: Dataset,
        spec: OracleSpec | None = None,
        saliency: SaliencyParams | None = None,
        min_overlap: float = 0.3,
        max_parallelism: int | None = None,
    ):
        self.dataset = dataset
        self.spec = spec or OracleSpec()
        self.saliency = saliency or SaliencyParams()
        self.min_overlap = min_overlap
        self.max_parallelism = max_parallelism

    def identity(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "view": "aux",
            "spec": asdict(self.spec),
            "saliency": asdict(self.saliency),
            "min_overlap": self.min_overlap,
        }

    def detect(self, scene_id: str, image: GreyImage, image_path: Path | None = None) -> list[Detection]:
        scene = self.dataset.scene(scene_id)
        spec = self.spec
        rng = scene_rng(spec.rng_seed, scene_id, "aux")
        boxes = detect_salient(image, self.saliency)
        labeled = match_and_transfer(
            boxes, [(g.box, g.category) for g in scene.main_gt], scene.lam, self.min_overlap
        )
        out = []
        for box, cat in labeled:
            noisy = _perturb(box, spec.loc_noise, rng, image.width, image.height)
            score = spec.score_law.hit_score(rng)
            if noisy is not None:
                out.append(Detection(noisy, cat, score, Source.ORACLE))
        for box, cat in _spurious(rng, spec, list(self.dataset.vocabulary), image.width, image.height):
            out.append(Detection(box, cat, spec.score_law.false, Source.ORACLE))
        return out


class PrecomputedDetector:
    kind = "precomputed"

    def __init__(self, path: str | Path, vocab: Vocabulary, max_parallelism: int | None = None):
        self.path = Path(path)
        self.detections: DetectionFile = read_detections(self.path, vocab=vocab)
        self.max_parallelism = max_parallelism

    def identity(self) -> dict[str, Any]:
        return {"kind": self.kind, "path": str(self.path)}

    def detect(self, scene_id: str, image: GreyImage, image_path: Path | None = None) -> list[Detection]:
        if scene_id not in self.detections.scenes:
            raise MissingScene(f"{self.path} has no entry for scene {scene_id!r}")
        out = []
        for d in self.detections.scenes[scene_id]:
            try:
                box = clip_coords(d.box.x1, d.box.y1, d.box.x2, d.box.y2, image.width, image.height)
            except NoOverlap:
                raise BackendFailure(f"precomputed box {d.box.as_list()} outside image", scene_id=scene_id) from None
            out.append(Detection(box, d.category, d.score, d.source))
        return out


class _Gate:
    def __init__(self, limit: int | None):
        self._sem = threading.BoundedSemaphore(limit) if limit else None

    def __enter__(self):
        if self._sem:
            self._sem.acquire()

    def __exit__(self, *exc):
        if self._sem:
            self._sem.release()


def _run_command(template: str, request: dict, timeout: float | None, scene_id: str | None) -> str:
    with tempfile.TemporaryDirectory(prefix="dvf-req-") as tmp:
        req_path = Path(tmp) / "request.json"
        req_path.write_text(json.dumps(request), encoding="utf-8")
        argv = [part.replace("{request}", str(req_path)) for part in shlex.split(template)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
        except FileNotFoundError as exc:
            raise BackendFailure(f"backend executable not found: {argv[0]}", scene_id=scene_id) from exc
        except subprocess.TimeoutExpired as exc:
            raise BackendFailure(f"backend timed out after {timeout}s", scene_id=scene_id) from exc
    if proc.returncode != 0:
        raise BackendFailure(
            f"backend exited with status {proc.returncode}", scene_id=scene_id, diagnostics=proc.stderr[-4000:]
        )
    return proc.stdout


class ExternalCommandDetector:
    kind = "external"

    def __init__(
        self,
        command: str,
        vocab: Vocabulary,
        max_parallelism: int | None = None,
        timeout: float | None = 600.0,
        source: Source = Source.MAIN_VIEW,
    ):
        if "{request}" not in command:
            raise InvalidValue("external command template must contain the '{request}' placeholder")
        self.command = command
        self.vocab = vocab
        self.max_parallelism = max_parallelism
        self.timeout = timeout
        self.source = source
        self._gate = _Gate(max_parallelism)

    def identity(self) -> dict[str, Any]:
        return {"kind": self.kind, "command": self.command, "max_parallelism": self.max_parallelism}

    def detect_batch(self, items: Sequence[tuple[str, Path, tuple[int, int]]]) -> dict[str, list[Detection]]:
        """``items`` are ``(scene_id, image_path, (width, height))``."""
        request = {"scenes": [{"scene_id": sid, "image": str(p)} for sid, p, _ in items]}
        first = items[0][0] if len(items) == 1 else None
        with self._gate:
            stdout = _run_command(self.command, request, self.timeout, first)
        dims = {sid: wh for sid, _, wh in items}
        out: dict[str, list[Detection]] = {sid: [] for sid in dims}
        for lineno, raw in enumerate(stdout.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                sid, det = parse_detection_record(json.loads(raw), self.vocab, lineno, "<backend stdout>")
            except (json.JSONDecodeError, DualViewError) as exc:
                raise BackendFailure(
                    f"malformed backend output on line {lineno}: {exc}", scene_id=first, diagnostics=raw[:500]
                ) from None
            if sid not in dims:
                raise BackendFailure(f"line {lineno}: reply names unrequested scene {sid!r}", scene_id=first)
            if det is None:
                continue
            w, h = dims[sid]
            try:
                box = clip_coords(det.box.x1, det.box.y1, det.box.x2, det.box.y2, w, h)
            except NoOverlap:
                raise BackendFailure(f"line {lineno}: box outside image", scene_id=sid) from None
            out[sid].append(Detection(box, det.category, det.score, self.source))
        return out

    def detect(self, scene_id: str, image: GreyImage, image_path: Path | None = None) -> list[Detection]:
        if image_path is None:
            with tempfile.TemporaryDirectory(prefix="dvf-img-") as tmp:
                p = Path(tmp) / f"{scene_id}.png"
                save_grey(image, p)
                return self.detect_batch([(scene_id, p, (image.width, image.height))])[scene_id]
        return self.detect_batch([(scene_id, image_path, (image.width, image.height))])[scene_id]


# --- experts --------------------------------------------------------------


@dataclass(frozen=True)
class PatchContext:
    """Where a patch came from: its scene, the strip box and the pixel offset of the crop."""

    scene_id: str
    region: BBox
    offset: tuple[int, int]
    category: Category


@dataclass(frozen=True)
class ExpertVerdict:
    category: Category
    score: float
    box: BBox  # patch-local

    @property
    def rejected(self) -> bool:
        return self.score == 0.0


class ExpertBackend(Protocol):
    def classify_patch(self, patch: GreyImage, context: PatchContext) -> ExpertVerdict: ...

    def identity(self) -> dict[str, Any]: ...


class OracleExpert:
    """Confirms a candidate when a ground-truth object of its categories lies in the strip.

    The object counts as inside when at least ``min_coverage`` of its width
    falls within the strip's abscissae.  Occluded objects are visible to the
    expert: it is pointed at them by the auxiliary view.  With
    ``false_accept > 0`` an empty strip is wrongly confirmed with that
    probability (deterministically per scene, region and ``seed``).
    """

    kind = "oracle"

    def __init__(
        self,
        dataset: Dataset,
        categories: Sequence[str],
        score: float = 1.0,
        min_coverage: float = 0.5,
        false_accept: float = 0.0,
        seed: int = 0,
    ):
        if not 0.0 <= false_accept <= 1.0:
            raise InvalidValue(f"false_accept must be in [0, 1], got {false_accept}")
        self.dataset = dataset
        self.categories = frozenset(categories)
        self.score = score
        self.min_coverage = min_coverage
        self.false_accept = false_accept
        self.seed = seed

    def identity(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "categories": sorted(self.categories),
            "score": self.score,
            "min_coverage": self.min_coverage,
            "false_accept": self.false_accept,
            "seed": self.seed,
        }

    def classify_patch(self, patch: GreyImage, context: PatchContext) -> ExpertVerdict:
        scene = self.dataset.scene(context.scene_id)
        region = context.region
        best = None
        for idx, gt in enumerate(scene.main_gt):
            if gt.category.abbreviation not in self.categories:
                continue
            inter = min(gt.box.x2, region.x2) - max(gt.box.x1, region.x1)
            if inter <= 0:
                continue
            coverage = inter / gt.box.width
            if coverage < self.min_coverage:
                continue
            key = (-coverage, -gt.box.area, idx)
            if best is None or key < best[0]:
                best = (key, gt)
        ox, oy = context.offset
        full = BBox(0, 0, patch.width, patch.height)
        if best is None:
            if self.false_accept > 0:
                rng = scene_rng(self.seed, context.scene_id, f"expert:{context.category.abbreviation}:{region.as_list()}")
                if float(rng.random()) < self.false_accept:
                    return ExpertVerdict(context.category, self.score, full)
            return ExpertVerdict(context.category, 0.0, full)
        gt = best[1]
        try:
            local = clip_coords(gt.box.x1 - ox, gt.box.y1 - oy, gt.box.x2 - ox, gt.box.y2 - oy, patch.width, patch.height)
        except NoOverlap:
            return ExpertVerdict(context.category, 0.0, full)
        return ExpertVerdict(gt.category, self.score, local)


class ExternalExpert:
    kind = "external"

    def __init__(self, command: str, vocab: Vocabulary, timeout: float | None = 120.0, max_parallelism: int | None = None):
        if "{request}" not in command:
            raise InvalidValue("external command template must contain the '{request}' placeholder")
        self.command = command
        self.vocab = vocab
        self.timeout = timeout
        self._gate = _Gate(max_parallelism)

    def identity(self) -> dict[str, Any]:
        return {"kind": self.kind, "command": self.command}

    def classify_patch(self, patch: GreyImage, context: PatchContext) -> ExpertVerdict:
        with tempfile.TemporaryDirectory(prefix="dvf-patch-") as tmp:
            ppath = Path(tmp) / "patch.png"
            save_grey(patch, ppath)
            request = {
                "patch": str(ppath),
                "scene_id": context.scene_id,
                "category": context.category.abbreviation,
                "offset": list(context.offset),
            }
            with self._gate:
                stdout = _run_command(self.command, request, self.timeout, context.scene_id)
        lines = [ln for ln in stdout.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise BackendFailure(f"expert must print exactly one JSON line, got {len(lines)}", scene_id=context.scene_id)
        try:
            rec = json.loads(lines[0])
            cat = self.vocab.get(rec["category"])
            score = rec["score"]
            box = BBox.from_seq(rec.get("bbox", [0, 0, patch.width, patch.height]))
        except (json.JSONDecodeError, KeyError, TypeError, DualViewError) as exc:
            raise BackendFailure(f"malformed expert reply: {exc}", scene_id=context.scene_id, diagnostics=lines[0][:500]) from None
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not (0.0 <= float(score) <= 1.0):
            raise BackendFailure(f"expert score {score!r} outside [0, 1]", scene_id=context.scene_id)
        try:
            box = clip_coords(box.x1, box.y1, box.x2, box.y2, patch.width, patch.height)
        except NoOverlap:
            raise BackendFailure("expert box lies outside the patch", scene_id=context.scene_id) from None
        return ExpertVerdict(cat, float(score), box)


def classify_patch(expert: ExpertBackend, patch: GreyImage, context: PatchContext) -> ExpertVerdict:
    if patch.width == 0 or patch.height == 0:
        raise InvalidValue("empty patch")
    return expert.classify_patch(patch, context)


class ExpertRegistry:
    """Challenging category abbreviation -> expert.  One expert may serve several categories."""

    def __init__(self, experts: Mapping[str, ExpertBackend], vocab: Vocabulary):
        for abbr in experts:
            if abbr not in vocab:
                raise InvalidValue(f"expert registered for unknown category {abbr!r}")
        self._experts = dict(experts)
        self.vocab = vocab

    def get(self, abbr: str) -> ExpertBackend | None:
        return self._experts.get(abbr)

    def __contains__(self, abbr: object) -> bool:
        return abbr in self._experts

    @property
    def categories(self) -> list[str]:
        return sorted(self._experts, key=lambda a: self.vocab.get(a).id)

    def identity(self) -> dict[str, Any]:
        return {abbr: self._experts[abbr].identity() for abbr in self.categories}


@dataclass
class Backends:
    main: DetectorBackend
    aux: DetectorBackend
    experts: ExpertRegistry

    def identity(self) -> dict[str, Any]:
        return {"main": self.main.identity(), "aux": self.aux.identity(), "experts": self.experts.identity()}


def make_detector(
    cfg: Mapping[str, Any],
    dataset: Dataset,
    view: str,
    saliency: SaliencyParams | None = None,
    min_overlap: float = 0.3,
    base_dir: Path | None = None,
) -> DetectorBackend:
    kind = cfg.get("kind", "oracle")
    maxp = cfg.get("max_parallelism")
    if kind == "oracle":
        spec = OracleSpec.from_dict(cfg)
        if view == "main":
            return OracleMainDetector(dataset, spec, maxp)
        return OracleAuxDetector(dataset, spec, saliency, min_overlap, maxp)
    if kind == "precomputed":
        path = Path(cfg["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return PrecomputedDetector(path, dataset.vocabulary, maxp)
    if kind == "external":
        return ExternalCommandDetector(cfg["command"], dataset.vocabulary, maxp, cfg.get("timeout", 600.0))
    raise InvalidValue(f"unknown backend kind {kind!r}")


def make_registry(cfg: Mapping[str, Any], dataset: Dataset, default_categories: Sequence[str]) -> ExpertRegistry:
    """Build the expert registry from config.

    Either ``{"kind": ..., "categories": [...]}`` (one expert per category,
    or one shared expert when ``"shared": true``) or a per-category mapping
    ``{"UM": {"kind": ...}, ...}``.
    """
    vocab = dataset.vocabulary

    def build(spec: Mapping[str, Any], cats: Sequence[str]) -> ExpertBackend:
        kind = spec.get("kind", "oracle")
        if kind == "oracle":
            return OracleExpert(
                dataset,
                cats,
                float(spec.get("score", 1.0)),
                float(spec.get("min_coverage", 0.5)),
                float(spec.get("false_accept", 0.0)),
                int(spec.get("seed", 0)),
            )
        if kind == "external":
            return ExternalExpert(spec["command"], vocab, spec.get("timeout", 120.0), spec.get("max_parallelism"))
        raise InvalidValue(f"unknown expert kind {kind!r}")

    if "kind" in cfg or not cfg:
        cats = list(cfg.get("categories", default_categories))
        if cfg.get("shared", False):
            shared = build(cfg, cats)
            return ExpertRegistry({c: shared for c in cats}, vocab)
        return ExpertRegistry({c: build(cfg, [c]) for c in cats}, vocab)
    return ExpertRegistry({abbr: build(spec, [abbr]) for abbr, spec in cfg.items()}, vocab)

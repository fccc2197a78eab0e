"""Geometry primitives, detection types and the cross-view abscissa transform.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with the origin at
the top-left pixel corner, so pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``.
Only abscissae are related between the two views; ordinates are independent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidValue, NoOverlap, UnknownCategory


@dataclass(frozen=True, order=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise InvalidValue(f"non-finite box coordinate in {coords}")
        if min(coords) < 0:
            raise InvalidValue(f"negative box coordinate in {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidValue(f"zero-area or inverted box {coords}")
        # normalise ints / numpy scalars so equality and JSON are stable
        for name, v in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, float(v))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise InvalidValue(f"bbox needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """1-D IoU of two closed intervals ``(lo, hi)``."""
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def clip_box(b: BBox, width: float, height: float) -> BBox:
    if width <= 0 or height <= 0:
        raise InvalidValue(f"image dimensions must be positive, got {width}x{height}")
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x1 >= x2 or y1 >= y2:
        raise NoOverlap(f"box {b.as_list()} lies outside {width}x{height} image")
    return BBox(x1, y1, x2, y2)


def clip_coords(x1: float, y1: float, x2: float, y2: float, width: float, height: float) -> BBox:
    """Like :func:`clip_box` but accepts raw coordinates that may be negative."""
    cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
    cx2, cy2 = min(x2, float(width)), min(y2, float(height))
    if not (cx1 < cx2 and cy1 < cy2):
        raise NoOverlap(f"box {[x1, y1, x2, y2]} lies outside {width}x{height} image")
    return BBox(cx1, cy1, cx2, cy2)


@dataclass(frozen=True)
class LambdaFactor:
    value: float

    def __post_init__(self) -> None:
        v = float(self.value)
        if not math.isfinite(v) or v <= 0:
            raise InvalidValue(f"lambda must be positive and finite, got {self.value!r}")
        object.__setattr__(self, "value", v)

    def __float__(self) -> float:
        return self.value


def _lam(lam: LambdaFactor | float) -> float:
    return lam.value if isinstance(lam, LambdaFactor) else LambdaFactor(lam).value


def map_aux_to_main_x(x: float, lam: LambdaFactor | float) -> float:
    if x < 0:
        raise InvalidValue(f"abscissa must be >= 0, got {x}")
    return _lam(lam) * x


def map_main_to_aux_x(x: float, lam: LambdaFactor | float) -> float:
    if x < 0:
        raise InvalidValue(f"abscissa must be >= 0, got {x}")
    return x / _lam(lam)


def map_interval_aux_to_main(lo: float, hi: float, lam: LambdaFactor | float) -> tuple[float, float]:
    # lambda scales both endpoints, hence widths scale by lambda too
    return map_aux_to_main_x(lo, lam), map_aux_to_main_x(hi, lam)


@dataclass(frozen=True)
class Category:
    id: int
    abbreviation: str
    name: str = ""

    def __str__(self) -> str:
        return self.abbreviation


LDXRAY_CATEGORIES: tuple[tuple[str, str], ...] = (
    ("MP", "Mobile Phone"),
    ("OL", "Orange Liquid"),
    ("PC1", "Portable Charger 1 (lithium-ion prismatic cell)"),
    ("PC2", "Portable Charger 2 (lithium-ion cylindrical cell)"),
    ("LA", "Laptop"),
    ("GL", "Green Liquid"),
    ("TA", "Tablet"),
    ("BL", "Blue Liquid"),
    ("CO", "Columnar Orange Liquid"),
    ("NL", "Nonmetallic Lighter"),
    ("UM", "Umbrella"),
    ("CG", "Columnar Green Liquid"),
)

CHALLENGING_DEFAULT: tuple[str, ...] = ("NL", "CO", "UM", "CG")


class Vocabulary:
    """Ordered category vocabulary; ids are positions."""

    def __init__(self, categories: Iterable[Category]):
        cats = tuple(categories)
        abbrs = [c.abbreviation for c in cats]
        if len(set(abbrs)) != len(abbrs):
            raise InvalidValue(f"duplicate category abbreviations in {abbrs}")
        ids = [c.id for c in cats]
        if len(set(ids)) != len(ids):
            raise InvalidValue(f"duplicate category ids in {ids}")
        self._cats = cats
        self._by_abbr = {c.abbreviation: c for c in cats}
        self._by_id = {c.id: c for c in cats}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(Category(i, a, n) for i, (a, n) in enumerate(LDXRAY_CATEGORIES))

    @classmethod
    def from_abbreviations(cls, abbrs: Iterable[str]) -> "Vocabulary":
        return cls(Category(i, a, a) for i, a in enumerate(abbrs))

    def __iter__(self) -> Iterator[Category]:
        return iter(self._cats)

    def __len__(self) -> int:
        return len(self._cats)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, Category):
            return self._by_abbr.get(item.abbreviation) == item
        if isinstance(item, str):
            return item in self._by_abbr
        return False

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._cats == other._cats

    def __repr__(self) -> str:
        return f"Vocabulary({[c.abbreviation for c in self._cats]})"

    def get(self, key: str | int | Category) -> Category:
        if isinstance(key, Category):
            key = key.abbreviation
        try:
            if isinstance(key, str):
                return self._by_abbr[key]
            return self._by_id[int(key)]
        except (KeyError, ValueError):
            raise UnknownCategory(f"category {key!r} not in vocabulary") from None

    @property
    def abbreviations(self) -> list[str]:
        return [c.abbreviation for c in self._cats]


class Source(str, enum.Enum):
    MAIN_VIEW = "MainView"
    AUX_REFINED = "AuxRefined"
    ORACLE = "Oracle"


@dataclass(frozen=True)
class Detection:
    box: BBox
    category: Category
    score: float
    source: Source = Source.MAIN_VIEW

    def __post_init__(self) -> None:
        s = float(self.score)
        if not (0.0 <= s <= 1.0):  # also rejects NaN
            raise InvalidValue(f"score must lie in [0, 1], got {self.score!r}")
        object.__setattr__(self, "score", s)
        object.__setattr__(self, "source", Source(self.source))

    def sort_key(self) -> tuple:
        """Canonical order: score descending, then category id, then coordinates."""
        b = self.box
        return (-self.score, self.category.id, b.x1, b.y1, b.x2, b.y2, self.source.value)


def canonical_sort(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=Detection.sort_key)


@dataclass(frozen=True, eq=False)
class GreyImage:
    """Single-channel image, intensities in [0, 1]; 1 is unattenuated background."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise InvalidValue(f"grey image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidValue("grey image intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, GreyImage) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"GreyImage({self.width}x{self.height})"

    def crop(self, box: BBox) -> "GreyImage":
        """Pixels covered by ``box``, expanded outward to whole pixels."""
        c0, r0 = int(math.floor(box.x1)), int(math.floor(box.y1))
        c1, r1 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
        c1, r1 = min(c1, self.width), min(r1, self.height)
        if c0 >= c1 or r0 >= r1:
            raise NoOverlap(f"crop {box.as_list()} is empty on {self.width}x{self.height} image")
        return GreyImage(self.pixels[r0:r1, c0:c1])


def load_grey(path: str | Path) -> GreyImage:
    """Decode an image file to [0, 1] greyscale; colour is reduced by luminance."""
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if mode.startswith("I;16") or arr.max() > 255 else 255.0
            arr = arr / scale
        elif mode == "F":
            arr = np.asarray(im, dtype=np.float64)
        elif mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        elif mode == "1":
            arr = np.asarray(im, dtype=np.float64)
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            arr = rgb @ np.array([0.299, 0.587, 0.114])
    return GreyImage(np.clip(arr, 0.0, 1.0))


def save_grey(img: GreyImage | np.ndarray, path: str | Path, bits: int = 16) -> None:
    arr = img.pixels if isinstance(img, GreyImage) else np.asarray(img, dtype=np.float64)
    if bits == 16:
        data = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        raise InvalidValue(f"bits must be 8 or 16, got {bits}")
    Image.fromarray(data).save(path, format="PNG", compress_level=1)

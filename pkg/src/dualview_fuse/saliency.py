"""Grey-map saliency for the auxiliary view.

Objects attenuate X-rays, so dark pixels are salient.  Candidate boxes come
from thresholding the inverted intensity, a morphological closing, and
8-connected component labelling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BBox, GreyImage
from .errors import InvalidValue


@dataclass(frozen=True)
class SaliencyParams:
    threshold: float = 0.25
    min_area: int = 400
    morph_radius: int = 3
    max_boxes: int = 32

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise InvalidValue(f"threshold must be in (0, 1), got {self.threshold}")
        if self.min_area < 1:
            raise InvalidValue(f"min_area must be >= 1, got {self.min_area}")
        if self.morph_radius < 0:
            raise InvalidValue(f"morph_radius must be >= 0, got {self.morph_radius}")
        if self.max_boxes < 1:
            raise InvalidValue(f"max_boxes must be >= 1, got {self.max_boxes}")


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise InvalidValue("saliency map must be 2-D")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise InvalidValue("saliency values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    def as_image(self) -> GreyImage:
        return GreyImage(self.values)


def grey_saliency(img: GreyImage) -> SaliencyMap:
    return SaliencyMap(1.0 - img.pixels)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (xx * xx + yy * yy) <= radius * radius


def binarize(smap: SaliencyMap, threshold: float) -> np.ndarray:
    return smap.values > threshold


def close_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    # pad so the erosion half of the closing does not eat objects at the border
    padded = np.pad(mask, radius + 1, mode="constant")
    closed = ndimage.binary_closing(padded, structure=_disk(radius))
    r = radius + 1
    return closed[r:-r, r:-r]


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels; 0 is background."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return labels, int(n)


def salient_components(smap: SaliencyMap, p: SaliencyParams | None = None) -> list[tuple[BBox, int, int]]:
    """Surviving components as ``(box, pixel_area, label)`` in output order.

    Ordering: area descending, then top-left position, so results are
    reproducible when areas tie.
    """
    p = p or SaliencyParams()
    mask = close_mask(binarize(smap, p.threshold), p.morph_radius)
    labels, n = label_components(mask)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    found = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or areas[lab] < p.min_area:
            continue
        rows, cols = sl
        box = BBox(cols.start, rows.start, cols.stop, rows.stop)
        found.append((box, int(areas[lab]), lab))
    found.sort(key=lambda t: (-t[1], t[0].y1, t[0].x1, t[2]))
    return found[: p.max_boxes]


def salient_boxes(smap: SaliencyMap, p: SaliencyParams | None = None) -> list[BBox]:
    return [box for box, _, _ in salient_components(smap, p)]


def detect_salient(img: GreyImage, p: SaliencyParams | None = None) -> list[BBox]:
    return salient_boxes(grey_saliency(img), p)

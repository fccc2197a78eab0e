"""Cross-view correspondence through the lambda abscissa relation.

Only x-intervals carry information between views, so matching uses the 1-D
interval IoU of the lambda-mapped auxiliary interval against main-view
intervals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BBox, Category, LambdaFactor, clip_coords, interval_iou, map_interval_aux_to_main
from .errors import DegenerateInput, EmptyInput, InvalidValue


@dataclass(frozen=True)
class Assignment:
    aux_index: int
    main_index: int | None
    overlap: float


def estimate_lambda(pairs: Sequence[tuple[tuple[float, float], tuple[float, float]]]) -> LambdaFactor:
    """Least-squares slope through the origin of main endpoints on aux endpoints."""
    if len(pairs) == 0:
        raise EmptyInput("estimate_lambda needs at least one interval pair")
    aux, main = [], []
    for (a_lo, a_hi), (m_lo, m_hi) in pairs:
        for lo, hi in ((a_lo, a_hi), (m_lo, m_hi)):
            if not (0 <= lo <= hi) or not np.isfinite(hi):
                raise InvalidValue(f"invalid interval ({lo}, {hi})")
        aux += [a_lo, a_hi]
        main += [m_lo, m_hi]
    a = np.asarray(aux, dtype=np.float64)
    m = np.asarray(main, dtype=np.float64)
    denom = float(np.dot(a, a))
    if denom == 0.0:
        raise DegenerateInput("all auxiliary endpoints are zero")
    lam = float(np.dot(a, m)) / denom
    if not lam > 0:
        raise DegenerateInput(f"fitted lambda {lam} is not positive")
    return LambdaFactor(lam)


def match_intervals(
    aux_boxes: Sequence[BBox],
    main_boxes: Sequence[BBox],
    lam: LambdaFactor,
    min_overlap: float = 0.3,
) -> list[Assignment]:
    """Greedy one-to-one matching, largest interval IoU first.

    Ties are broken by aux index then main index.  One assignment per aux
    box is returned, in aux order; unmatched entries have ``main_index=None``.
    """
    if not 0.0 < min_overlap <= 1.0:
        raise InvalidValue(f"min_overlap must be in (0, 1], got {min_overlap}")
    candidates = []
    for i, a in enumerate(aux_boxes):
        mapped = map_interval_aux_to_main(a.x1, a.x2, lam)
        for j, m in enumerate(main_boxes):
            ov = interval_iou(mapped, (m.x1, m.x2))
            if ov >= min_overlap:
                candidates.append((-ov, i, j))
    candidates.sort()
    used_aux: dict[int, tuple[int, float]] = {}
    used_main: set[int] = set()
    for neg_ov, i, j in candidates:
        if i in used_aux or j in used_main:
            continue
        used_aux[i] = (j, -neg_ov)
        used_main.add(j)
    out = []
    for i in range(len(aux_boxes)):
        if i in used_aux:
            j, ov = used_aux[i]
            out.append(Assignment(i, j, ov))
        else:
            out.append(Assignment(i, None, 0.0))
    return out


def match_and_transfer(
    aux_boxes: Sequence[BBox],
    main_boxes: Sequence[tuple[BBox, Category]],
    lam: LambdaFactor,
    min_overlap: float = 0.3,
) -> list[tuple[BBox, Category]]:
    """Label auxiliary boxes with the category of their matched main box.

    Unmatched auxiliary boxes are dropped.
    """
    assignments = match_intervals(aux_boxes, [b for b, _ in main_boxes], lam, min_overlap)
    return [
        (aux_boxes[a.aux_index], main_boxes[a.main_index][1])
        for a in assignments
        if a.main_index is not None
    ]


def main_strip_for_aux(
    aux_box: BBox, lam: LambdaFactor, main_dims: tuple[float, float], pad: float = 8.0
) -> BBox:
    """Full-height main-view strip covering the mapped abscissae of ``aux_box``."""
    w, h = main_dims
    lo, hi = map_interval_aux_to_main(aux_box.x1, aux_box.x2, lam)
    return clip_coords(lo - pad, 0.0, hi + pad, float(h), w, h)

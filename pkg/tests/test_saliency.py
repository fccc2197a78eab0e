import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualview_fuse.core import BBox, GreyImage, iou
from dualview_fuse.errors import InvalidValue
from dualview_fuse.saliency import (
    SaliencyParams,
    binarize,
    close_mask,
    grey_saliency,
    label_components,
    salient_boxes,
    salient_components,
)


def white(w=100, h=100):
    return np.ones((h, w))


def test_grey_saliency_inversion():
    assert np.all(grey_saliency(GreyImage(white())).values == 0.0)
    assert np.all(grey_saliency(GreyImage(np.zeros((5, 5)))).values == 1.0)
    img = white(3, 3)
    img[1, 1] = 0.3
    assert grey_saliency(GreyImage(img)).values[1, 1] == pytest.approx(0.7)
    assert grey_saliency(GreyImage(img)).values.shape == (3, 3)


def test_single_square():
    img = white()
    img[40:60, 40:60] = 0.0
    boxes = salient_boxes(grey_saliency(GreyImage(img)), SaliencyParams(threshold=0.5))
    assert len(boxes) == 1
    assert iou(boxes[0], BBox(40, 40, 60, 60)) >= 0.9


def test_all_white_is_empty():
    assert salient_boxes(grey_saliency(GreyImage(white()))) == []


def test_two_blobs_separated_beyond_closing():
    p = SaliencyParams(threshold=0.5, min_area=50, morph_radius=3)
    img = white(120, 60)
    img[10:40, 10:40] = 0.1
    img[10:40, 40 + 2 * 3 + 1 : 77] = 0.1  # gap 7 px > 2 * radius
    boxes = salient_boxes(grey_saliency(GreyImage(img)), p)
    assert len(boxes) == 2
    assert sorted((b.x1, b.x2) for b in boxes) == [(10, 40), (47, 77)]


def test_closing_bridges_small_gap():
    p = SaliencyParams(threshold=0.5, min_area=50, morph_radius=3)
    img = white(120, 60)
    img[10:40, 10:40] = 0.1
    img[10:40, 43:70] = 0.1  # gap 3 px is closed
    assert len(salient_boxes(grey_saliency(GreyImage(img)), p)) == 1


def test_min_area_and_max_boxes():
    img = white(200, 50)
    for k in range(5):
        img[5 : 5 + 10 + k, 10 + 35 * k : 30 + 35 * k] = 0.0
    smap = grey_saliency(GreyImage(img))
    comps = salient_components(smap, SaliencyParams(min_area=250, morph_radius=1))
    assert [a for _, a, _ in comps] == [20 * 14, 20 * 13]
    assert len(salient_boxes(smap, SaliencyParams(min_area=1, morph_radius=1, max_boxes=3))) == 3


def test_border_touching_component_kept():
    img = white()
    img[0:30, 0:30] = 0.0
    boxes = salient_boxes(grey_saliency(GreyImage(img)))
    assert boxes == [BBox(0, 0, 30, 30)]


def test_diagonal_pixels_are_eight_connected():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True
    _, n = label_components(mask)
    assert n == 1


@pytest.mark.parametrize("kw", [{"threshold": 0.0}, {"threshold": 1.0}, {"min_area": 0}, {"max_boxes": 0}])
def test_params_validated(kw):
    with pytest.raises(InvalidValue):
        SaliencyParams(**kw)


images = st.integers(0, 2**32 - 1).map(
    lambda seed: np.clip(np.random.default_rng(seed).random((40, 50)) ** 0.3, 0, 1)
)


@settings(max_examples=40, deadline=None)
@given(images, st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_threshold_monotone_salient_pixels(img, t1, t2):
    lo, hi = sorted((t1, t2))
    smap = grey_saliency(GreyImage(img))
    assert binarize(smap, hi).sum() <= binarize(smap, lo).sum()


@settings(max_examples=40, deadline=None)
@given(images)
def test_components_disjoint_and_deterministic(img):
    p = SaliencyParams(threshold=0.3, min_area=5, morph_radius=1)
    smap = grey_saliency(GreyImage(img))
    first = salient_components(smap, p)
    assert first == salient_components(smap, p)
    labels = {lab for _, _, lab in first}
    assert len(labels) == len(first)
    mask = close_mask(binarize(smap, p.threshold), p.morph_radius)
    lab_img, _ = label_components(mask)
    for box, area, lab in first:
        sub = lab_img[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)]
        assert np.count_nonzero(lab_img == lab) == area
        assert np.count_nonzero(sub == lab) == area  # box is tight around its own component

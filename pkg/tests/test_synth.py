import hashlib

import numpy as np
import pytest

from dualview_fuse.crossview import estimate_lambda
from dualview_fuse.dataset_io import load_dataset, validate_stats
from dualview_fuse.errors import InvalidValue
from dualview_fuse.synth import SceneSpec, generate_dataset, load_truth, occlusion_benchmark_spec


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_lambda_one_gives_identical_intervals(tmp_path):
    ds = generate_dataset(SceneSpec(lam=1.0, main_size=(320, 200), aux_height=200, rng_seed=3), 5, tmp_path)
    for sid, objs in load_truth(tmp_path).items():
        for o in objs:
            assert (o.main_box.x1, o.main_box.x2) == (o.aux_box.x1, o.aux_box.x2)
    assert ds.lam.value == 1.0


def test_aux_is_exact_lambda_image(tmp_path):
    spec = SceneSpec(lam=1.6, rng_seed=4)
    ds = generate_dataset(spec, 4, tmp_path)
    pairs = []
    for scene in ds:
        assert scene.aux_size[0] * 1.6 == pytest.approx(scene.main_size[0], abs=1.6)
    for objs in load_truth(tmp_path).values():
        for o in objs:
            assert o.main_box.x1 == pytest.approx(1.6 * o.aux_box.x1, rel=1e-12)
            pairs.append(((o.aux_box.x1, o.aux_box.x2), (o.main_box.x1, o.main_box.x2)))
    assert abs(estimate_lambda(pairs).value - 1.6) <= 1e-9


def test_full_occlusion_hides_objects_but_keeps_gt(tmp_path):
    spec = SceneSpec(always_include=("UM",), occlusion={"UM": 1.0}, min_objects=1, max_objects=1, noise=0.0, rng_seed=2)
    ds = generate_dataset(spec, 3, tmp_path)
    for scene in ds:
        px = scene.load_main().pixels
        # only the bag (and white surround) remains: nothing darker than the bag
        assert px.min() >= spec.bag_intensity - 1e-4
        assert len(scene.main_gt) == 1 and scene.main_gt[0].occluded_main
        assert scene.load_aux().pixels.min() < 0.7  # still visible in the aux view


def test_same_seed_byte_identical(tmp_path):
    spec = occlusion_benchmark_spec(seed=9)
    generate_dataset(spec, 6, tmp_path / "a")
    generate_dataset(spec, 6, tmp_path / "b", jobs=3)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_dataset(occlusion_benchmark_spec(seed=10), 6, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_zero_objects_flagged(tmp_path):
    generate_dataset(SceneSpec(min_objects=0, max_objects=0), 1, tmp_path)
    ds = load_dataset(tmp_path)
    stats = validate_stats(ds)
    assert stats.empty_scenes == ["scene_00000"]
    assert "scenes_without_annotations" in stats.flags


def test_occlusion_benchmark_composition(occlusion_ds):
    n_occ = 0
    for scene in occlusion_ds:
        ums = [g for g in scene.main_gt if g.category.abbreviation == "UM"]
        assert len(ums) >= 1
        n_occ += any(g.occluded_main for g in ums)
    assert 0 < n_occ < len(occlusion_ds.scenes)
    assert occlusion_ds.extra["synth"]["scenes_with_occluded"]["UM"] == n_occ


def test_spec_validation_and_round_trip():
    with pytest.raises(InvalidValue):
        SceneSpec(lam=0)
    with pytest.raises(InvalidValue):
        SceneSpec(min_objects=3, max_objects=2)
    spec = occlusion_benchmark_spec(seed=3)
    assert SceneSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()

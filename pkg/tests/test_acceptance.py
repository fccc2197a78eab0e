"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (or
``python tests/test_acceptance.py``).  Criteria 9 and 10 need the real
LDXray data and are skipped unless ``LDXRAY_ROOT`` is set; criterion 9
additionally needs ``LDXRAY_BACKENDS`` pointing at a pipeline config whose
backends wrap trained detectors and experts.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dualview_fuse.cli import main as cli_main
from dualview_fuse.config import FusionConfig, PipelineConfig, load_config
from dualview_fuse.core import BBox, Detection, Vocabulary, iou
from dualview_fuse.crossview import estimate_lambda
from dualview_fuse.dataset_io import format_detections, load_dataset, validate_stats
from dualview_fuse.evaluation import evaluate, match_detections, threshold_sweep, ap_category
from dualview_fuse.pipeline import build_backends, merge_boxes, refuse, run_dataset
from dualview_fuse.saliency import SaliencyParams, detect_salient
from dualview_fuse.synth import SceneSpec, generate_dataset, load_truth, occlusion_benchmark_spec
from oracles import ap_oracle, greedy_nms_oracle, raster_iou

LDXRAY_ROOT = os.environ.get("LDXRAY_ROOT")
LDXRAY_BACKENDS = os.environ.get("LDXRAY_BACKENDS")
JOBS = os.cpu_count() or 1
OCC_BACKENDS = {
    "main": {"kind": "oracle", "miss_rate_main": 1.0, "seed": 7},
    "aux": {"kind": "oracle", "seed": 7},
    "experts": {"kind": "oracle"},
}


@pytest.fixture
def verdict(request, capsys):
    """Call ``verdict(ok, detail)``: prints one PASS/FAIL line, then asserts."""
    name = request.node.name.removeprefix("test_")

    def record(ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return record


def _skip(request, capsys, reason: str):
    with capsys.disabled():
        print(f"\n[acceptance] SKIP {request.node.name.removeprefix('test_')}: {reason}")
    pytest.skip(reason)


# --- 1-3: oracle equivalence ---------------------------------------------------


def test_criterion_1_iou_vs_raster_oracle(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    n = 0
    while n < 10_000:
        c = rng.integers(0, 65, size=8)
        a = (min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3]))
        b = (min(c[4], c[6]), min(c[5], c[7]), max(c[4], c[6]), max(c[5], c[7]))
        if a[0] == a[2] or a[1] == a[3] or b[0] == b[2] or b[1] == b[3]:
            continue
        worst = max(worst, abs(iou(BBox(*a), BBox(*b)) - raster_iou(a, b, size=65)))
        n += 1
    elapsed = time.perf_counter() - start
    verdict(worst <= 1e-6 and elapsed < 5.0, f"{n} pairs, max |err| {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_nms_vs_greedy_oracle(verdict):
    rng = np.random.default_rng(2)
    vocab = Vocabulary.default()
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(0, 13))
        thresh = float(rng.choice([0.3, 0.5, 0.7]))
        items = []
        for _ in range(k):
            x, y = (int(v) for v in rng.integers(0, 60, size=2))
            w, h = (int(v) for v in rng.integers(2, 40, size=2))
            items.append((x, y, x + w, y + h, int(rng.integers(0, 3)), int(rng.integers(1, 21)) / 20))
        dets = [Detection(BBox(*t[:4]), vocab.get(t[4]), t[5]) for t in items]
        got = sorted((tuple(d.box.as_list()), d.category.id, d.score) for d in merge_boxes(dets, "nms", thresh))
        want = sorted((tuple(float(v) for v in t[:4]), t[4], t[5]) for t in greedy_nms_oracle(items, thresh))
        mismatches += got != want
    verdict(mismatches == 0, f"1000 instances, {mismatches} mismatches")


def test_criterion_3_ap_vs_enumeration_oracle(verdict):
    rng = np.random.default_rng(3)
    worst, flag_mismatch, nan_mismatch = 0.0, 0, 0
    for _ in range(500):
        scenes = ["a", "b"]

        def box():
            x, y = (int(v) for v in rng.integers(0, 40, size=2))
            w, h = (int(v) for v in rng.integers(3, 30, size=2))
            return (x, y, x + w, y + h)

        dets = [(str(rng.choice(scenes)), box(), int(rng.integers(0, 11)) / 10) for _ in range(int(rng.integers(0, 9)))]
        gts = [(str(rng.choice(scenes)), box()) for _ in range(int(rng.integers(0, 5)))]
        # plant near-copies of GT so that true positives actually occur
        for s, g in gts[: int(rng.integers(0, len(gts) + 1))]:
            if len(dets) < 8:
                dets.append((s, g, int(rng.integers(0, 11)) / 10))
        thresh = float(rng.choice([0.5, 0.75]))
        want, want_flags = ap_oracle(dets, gts, thresh)
        pdets = [(s, BBox(*b), sc) for s, b, sc in dets]
        pgts = [(s, BBox(*b)) for s, b in gts]
        _, flags = match_detections(pdets, pgts, thresh)
        flag_mismatch += flags != want_flags
        got = ap_category(pdets, pgts, thresh)
        if want is None:
            nan_mismatch += not math.isnan(got)
        else:
            worst = max(worst, abs(got - float(want)))
    ok = flag_mismatch == 0 and nan_mismatch == 0 and worst <= 1e-9
    verdict(ok, f"500 instances, TP-flag mismatches {flag_mismatch}, max |AP err| {worst:.1e} (AP in percent)")


# --- 4-5: geometry and saliency on synthetic data ---------------------------------


@pytest.fixture(scope="module")
def saliency_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_saliency")
    return generate_dataset(SceneSpec(rng_seed=2025), 200, root, jobs=JOBS)


def test_criterion_4_lambda_recovery(verdict, tmp_path):
    details, ok = [], True
    rng = np.random.default_rng(4)
    for k, lam in enumerate((0.8, 1.25, 1.7)):
        root = tmp_path / f"lam{k}"
        generate_dataset(SceneSpec(lam=lam, rng_seed=40 + k, min_objects=2), 12, root)
        pairs = [
            ((o.aux_box.x1, o.aux_box.x2), (o.main_box.x1, o.main_box.x2))
            for objs in load_truth(root).values()
            for o in objs
        ]
        exact = estimate_lambda(pairs).value
        noisy_pairs = [
            ((max(0.0, a0 + rng.uniform(-1, 1)), a1 + rng.uniform(-1, 1)), (max(0.0, m0 + rng.uniform(-1, 1)), m1 + rng.uniform(-1, 1)))
            for (a0, a1), (m0, m1) in pairs
        ]
        noisy = estimate_lambda(noisy_pairs).value
        e_exact, e_noisy = abs(exact - lam), abs(noisy - lam) / lam
        ok &= len(pairs) >= 20 and e_exact <= 1e-9 and e_noisy <= 0.02
        details.append(f"lam={lam}: {len(pairs)} pairs, exact err {e_exact:.1e}, noisy rel err {100 * e_noisy:.3f}%")
    verdict(ok, "; ".join(details))


def test_criterion_5_saliency_recovery(verdict, saliency_bench):
    truth = load_truth(saliency_bench.root)
    params = SaliencyParams()
    found = total = 0
    for scene in saliency_bench:
        boxes = detect_salient(scene.load_aux(), params)
        for obj in truth[scene.scene_id]:
            total += 1
            found += any(iou(b, obj.aux_box) >= 0.5 for b in boxes)
    rate = found / total
    verdict(rate >= 0.95, f"{found}/{total} aux objects recovered at IoU>=0.5 ({100 * rate:.2f}%) over 200 scenes")


# --- 6-7: end-to-end occlusion benchmark -------------------------------------------


@pytest.fixture(scope="module")
def occlusion_run(tmp_path_factory):
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("acc_occ")
    ds = generate_dataset(occlusion_benchmark_spec(seed=2024, occlusion=0.5), 200, root, jobs=JOBS)
    cfg = PipelineConfig.from_dict({"backends": OCC_BACKENDS})
    res = run_dataset(ds, cfg, build_backends(cfg, ds), jobs=JOBS)
    main_rep = evaluate(res.main, ds)
    fused_rep = evaluate(res.fused, ds)
    return ds, cfg, res, main_rep, fused_rep, time.perf_counter() - start


def test_criterion_6_occlusion_benefit(verdict, occlusion_run):
    ds, cfg, _, main_rep, fused_rep, elapsed = occlusion_run
    um_main = main_rep.per_category["UM"]["0.50"]
    um_fused = fused_rep.per_category["UM"]["0.50"]
    challenging = set(cfg.fusion.aux_categories)
    drifted = [
        a for a in main_rep.per_category
        if a not in challenging and main_rep.per_category[a]["0.50"] != fused_rep.per_category[a]["0.50"]
    ]
    gain = um_fused - um_main
    ok = gain >= 30.0 and not drifted and elapsed < 120.0
    verdict(
        ok,
        f"UM AP50 main-only {um_main:.2f} -> fused {um_fused:.2f} (+{gain:.2f}); "
        f"non-challenging categories changed: {drifted or 'none'}; {elapsed:.1f}s for synth+run+eval",
    )


def test_criterion_7_threshold_one_reduces_to_main(verdict, occlusion_run, saliency_bench):
    _, _, res, _, _, _ = occlusion_run
    same_occ = format_detections(refuse(res.main, res.refined, FusionConfig(conf_threshold=1.0)).canonical()) == format_detections(
        res.main.canonical()
    )
    # a second dataset with noisy scores and false positives
    cfg = PipelineConfig.from_dict(
        {
            "fusion": {"conf_threshold": 1.0},
            "backends": {
                "main": {"kind": "oracle", "loc_noise": 2.0, "false_positives_per_scene": 1.0, "seed": 1},
                "aux": {"kind": "oracle", "loc_noise": 2.0, "seed": 2},
                "experts": {"kind": "oracle"},
            },
        }
    )
    r2 = run_dataset(saliency_bench, cfg, build_backends(cfg, saliency_bench), jobs=JOBS)
    same_noisy = format_detections(r2.fused.canonical()) == format_detections(r2.main.canonical())
    verdict(same_occ and same_noisy, f"occlusion benchmark identical: {same_occ}; noisy 200-scene set identical: {same_noisy}")


# --- 8: determinism ----------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_8_determinism(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"backends": {**OCC_BACKENDS, "main": {**OCC_BACKENDS["main"], "loc_noise": 1.0}}}))
    digests = []
    for k, jobs in enumerate(("1", "4")):
        d = tmp_path / f"run{k}"
        assert cli_main(["--jobs", jobs, "synth", "--benchmark", "occlusion", "--n", "30", "--seed", "99", "--out", str(d / "ds")]) == 0
        assert cli_main(["--jobs", jobs, "run", str(d / "ds"), "--config", str(cfg), "--out", str(d / "out.jsonl")]) == 0
        assert cli_main(["eval", str(d / "out.jsonl"), str(d / "ds"), "--json", str(d / "report.json")]) == 0
        files = ["out.jsonl", "out.main.jsonl", "out.aux_refined.jsonl", "report.json"]
        digests.append({f: _digest(d / f) for f in files})
    same = digests[0] == digests[1]
    verdict(same, f"{len(digests[0])} output files byte-identical across two runs (jobs 1 vs 4): {same}")


# --- 9-10: conditional on the real dataset ------------------------------------------------


def test_criterion_9_ldxray_reproduction(verdict, request, capsys):
    if not (LDXRAY_ROOT and LDXRAY_BACKENDS):
        _skip(request, capsys, "needs LDXRAY_ROOT and LDXRAY_BACKENDS (trained detector/expert backends)")
    ds = load_dataset(LDXRAY_ROOT, "test", jobs=JOBS)
    cfg = load_config(LDXRAY_BACKENDS)
    res = run_dataset(ds, cfg, build_backends(cfg, ds, Path(LDXRAY_BACKENDS).parent), jobs=JOBS)
    main_um = evaluate(res.main, ds).per_category["UM"]["0.50"]
    rows = threshold_sweep(res.main, res.refined, ds, [round(0.1 * k, 1) for k in range(1, 11)], cfg.fusion)
    best = max(rows, key=lambda r: r.mAP)
    fused_um = next(r for r in rows if r.threshold == 0.6).per_category_ap50["UM"]
    ok = (
        abs(main_um - 45.6) <= 1.0 and abs(fused_um - 65.7) <= 1.0
        and best.threshold == 0.6 and abs(best.mAP - 39.1) <= 1.0
    )
    verdict(ok, f"UM AP50 {main_um:.1f} -> {fused_um:.1f}; best threshold {best.threshold} with mAP {best.mAP:.1f}")


def test_criterion_10_ldxray_statistics(verdict, request, capsys):
    if not LDXRAY_ROOT:
        _skip(request, capsys, "needs LDXRAY_ROOT")
    train = validate_stats(load_dataset(LDXRAY_ROOT, "train", jobs=JOBS))
    test = validate_stats(load_dataset(LDXRAY_ROOT, "test", jobs=JOBS))
    total = train.n_instances + test.n_instances
    per_image = total / (train.n_scenes + test.n_scenes)
    ok = train.n_instances == 265_331 and test.n_instances == 88_315 and total == 353_646 and abs(per_image - 2.27) <= 0.01
    verdict(ok, f"train {train.n_instances}, test {test.n_instances}, total {total}, {per_image:.3f} instances/image")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

#!/usr/bin/env python3
"""Fraction of synthetic auxiliary-view objects recovered by grey-map saliency.

Reports recall at IoU >= 0.5 and the mean number of salient boxes per scene
over a grid of binarisation thresholds and closing radii.

    python scripts/saliency_recovery.py --n 200 --thresholds 0.1 0.25 0.4 --radii 1 3 6
"""

from __future__ import annotations

import argparse
import os
import tempfile

from dualview_fuse.core import iou
from dualview_fuse.saliency import SaliencyParams, detect_salient
from dualview_fuse.synth import SceneSpec, generate_dataset, load_truth


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=2025)
    p.add_argument("--noise", type=float, default=0.02, help="render noise sigma")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.1, 0.25, 0.4])
    p.add_argument("--radii", type=int, nargs="+", default=[1, 3, 6])
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    args = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        ds = generate_dataset(SceneSpec(rng_seed=args.seed, noise=args.noise), args.n, tmp, jobs=args.jobs)
        truth = load_truth(tmp)
        images = {s.scene_id: s.load_aux() for s in ds}
    print(f"{'threshold':>9} {'radius':>6} {'recall':>7} {'boxes/scene':>11}")
    for t in args.thresholds:
        for r in args.radii:
            params = SaliencyParams(threshold=t, morph_radius=r)
            found = total = n_boxes = 0
            for sid, img in images.items():
                boxes = detect_salient(img, params)
                n_boxes += len(boxes)
                for obj in truth[sid]:
                    total += 1
                    found += any(iou(b, obj.aux_box) >= 0.5 for b in boxes)
            print(f"{t:9.2f} {r:6d} {found / total:7.3f} {n_boxes / len(images):11.2f}")


if __name__ == "__main__":
    main()

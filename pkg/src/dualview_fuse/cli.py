"""``dualview-fuse`` command line.

Exit codes: 0 success, 1 validation/usage error, 2 backend failure.
Logs go to stderr; data goes to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from ._io import atomic_write_text, dumps, read_json, write_json
from .config import CONFIG_SCHEMA_VERSION, PipelineConfig, load_config
from .core import CHALLENGING_DEFAULT, load_grey, save_grey
from .crossview import estimate_lambda
from .dataset_io import SCHEMA_VERSION, format_detections, load_dataset, read_detections, validate_stats, write_detections
from .errors import BackendFailure, DualViewError, MissingScene
from .evaluation import evaluate, parse_range, sweep_to_csv, sweep_to_json, threshold_sweep
from .pipeline import build_aux_pseudolabels, build_backends, export_expert_crops, run_dataset
from .saliency import SaliencyParams, grey_saliency, salient_components
from .synth import SceneSpec, generate_dataset, occlusion_benchmark_spec

log = logging.getLogger("dualview_fuse")

EXIT_OK, EXIT_INVALID, EXIT_BACKEND = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which we reserve for backends
        self.print_usage(sys.stderr)
        raise UsageError(message)


def write_run_manifest(path: Path, command: str, argv: Sequence[str], started: float, **payload: Any) -> None:
    """Reproducibility record written next to every output."""
    doc = {
        "tool": "dualview-fuse",
        "tool_version": __version__,
        "schemas": {"dataset": SCHEMA_VERSION, "config": CONFIG_SCHEMA_VERSION},
        "command": command,
        "argv": list(argv),
        "python": platform.python_version(),
        "timing": {"started_unix": started, "seconds": round(time.time() - started, 3)},
        **payload,
    }
    write_json(path, doc)


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name.split(".")[0] + ".manifest.json") if out.suffix else out / "run_manifest.json"


def _sibling(out: Path, tag: str) -> Path:
    stem = out.name[: -len(out.suffix)] if out.suffix else out.name
    return out.with_name(f"{stem}.{tag}{out.suffix or '.jsonl'}")


def _jobs(args: argparse.Namespace) -> int:
    return args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)


# --- subcommands ------------------------------------------------------------


def cmd_validate(args, argv) -> int:
    ds = load_dataset(args.root, args.split, jobs=_jobs(args))
    print(dumps(validate_stats(ds).to_dict()))
    return EXIT_OK


def cmd_saliency(args, argv) -> int:
    img = load_grey(args.image)
    params = SaliencyParams(args.threshold, args.min_area, args.morph_radius, args.max_boxes)
    smap = grey_saliency(img)
    if args.dump_map:
        save_grey(smap.as_image(), args.dump_map, bits=8)
    for box, area, _ in salient_components(smap, params):
        print(json.dumps({"bbox": box.as_list(), "area": area}, sort_keys=True))
    return EXIT_OK


def cmd_estimate_lambda(args, argv) -> int:
    raw = read_json(args.pairs)
    pairs = []
    for item in raw:
        if isinstance(item, dict):
            pairs.append((tuple(item["aux"]), tuple(item["main"])))
        else:
            pairs.append((tuple(item[0]), tuple(item[1])))
    print(repr(estimate_lambda(pairs).value))
    return EXIT_OK


def cmd_export_crops(args, argv) -> int:
    started = time.time()
    ds = load_dataset(args.root, args.split)
    cats = [c for c in args.categories.split(",") if c] if args.categories else list(CHALLENGING_DEFAULT)
    summary = export_expert_crops(ds, cats, args.out)
    out = Path(args.out)
    write_run_manifest(out / "run_manifest.json", "export-crops", argv, started, summary=summary.to_dict())
    print(dumps(summary.to_dict()))
    return EXIT_OK


def cmd_pseudolabel(args, argv) -> int:
    started = time.time()
    ds = load_dataset(args.root, args.split)
    cfg = load_config(args.config)
    summary = build_aux_pseudolabels(ds, cfg, args.out)
    out = Path(args.out)
    mdir = out.parent if out.suffix == ".json" else out
    write_run_manifest(mdir / "run_manifest.json", "pseudolabel", argv, started, config=cfg.to_dict(), summary=summary.to_dict())
    print(dumps(summary.to_dict()))
    return EXIT_OK


def cmd_run(args, argv) -> int:
    from dataclasses import replace

    started = time.time()
    ds = load_dataset(args.root, args.split, jobs=_jobs(args))
    cfg = load_config(args.config)
    if args.strict_union:
        cfg = replace(cfg, fusion=replace(cfg.fusion, strict_union=True))
    if args.conf_threshold is not None:
        cfg = cfg.with_threshold(args.conf_threshold)
    base = Path(args.config).parent if args.config else None
    backends = build_backends(cfg, ds, base)
    result = run_dataset(ds, cfg, backends, jobs=_jobs(args))
    out = Path(args.out)
    write_detections(result.fused.canonical(), out)
    write_detections(result.main.canonical(), _sibling(out, "main"))
    write_detections(result.refined.canonical(), _sibling(out, "aux_refined"))
    seeds = {k: v.get("seed", v.get("rng_seed", 0)) for k, v in cfg.backends.items() if isinstance(v, dict)}
    write_run_manifest(
        _manifest_path(out),
        "run",
        argv,
        started,
        dataset={"root": str(ds.root), "split": ds.split, "n_scenes": len(ds)},
        config=cfg.to_dict(),
        seeds=seeds,
        backends=backends.identity(),
        counts=result.counts,
        outputs={"fused": str(out), "main": str(_sibling(out, "main")), "aux_refined": str(_sibling(out, "aux_refined"))},
    )
    log.info("run: %d scenes, counts %s", len(ds), result.counts)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    ds = load_dataset(args.root, args.split)
    dets = read_detections(args.dets, dataset=ds)
    report = evaluate(dets, ds, args.iou)
    if args.json:
        write_json(args.json, report.to_dict())
    print(report.to_table())
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    started = time.time()
    ds = load_dataset(args.root, args.split)
    cfg = load_config(args.config)
    main = read_detections(args.main, dataset=ds)
    aux = read_detections(args.aux, dataset=ds)
    rows = threshold_sweep(main, aux, ds, parse_range(args.thresholds), cfg.fusion)
    text = sweep_to_csv(rows)
    if args.csv:
        atomic_write_text(args.csv, text)
    if args.json:
        write_json(args.json, sweep_to_json(rows))
        write_run_manifest(_manifest_path(Path(args.json)), "sweep", argv, started, config=cfg.to_dict())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, argv) -> int:
    started = time.time()
    if args.spec:
        spec = SceneSpec.from_dict(read_json(args.spec))
    elif args.benchmark == "occlusion":
        spec = occlusion_benchmark_spec()
    else:
        spec = SceneSpec()
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, rng_seed=args.seed)
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise DualViewError(f"{out} already holds a dataset; pass --force to overwrite")
    ds = generate_dataset(spec, args.n, out, jobs=_jobs(args))
    write_run_manifest(out / "run_manifest.json", "synth", argv, started, spec=spec.to_dict(), seeds={"synth": spec.rng_seed})
    print(dumps(validate_stats(ds).to_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualview-fuse", description="Dual-view X-ray detection fusion toolkit.")
    p.add_argument("--version", action="version", version=f"dualview-fuse {__version__} (dataset schema {SCHEMA_VERSION}, config schema {CONFIG_SCHEMA_VERSION})")
    p.add_argument("--jobs", type=int, default=0, help="worker count (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("validate", help="load a dataset and print its statistics as JSON")
    s.add_argument("root")
    s.add_argument("--split")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("saliency", help="salient boxes of one image as JSON Lines")
    s.add_argument("image")
    d = SaliencyParams()
    s.add_argument("--threshold", type=float, default=d.threshold)
    s.add_argument("--min-area", type=int, default=d.min_area)
    s.add_argument("--morph-radius", type=int, default=d.morph_radius)
    s.add_argument("--max-boxes", type=int, default=d.max_boxes)
    s.add_argument("--dump-map", help="write the saliency map as a PNG")
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("estimate-lambda", help="fit lambda from aux/main interval pairs")
    s.add_argument("pairs", help='JSON list of {"aux": [x1, x2], "main": [x1, x2]}')
    s.set_defaults(func=cmd_estimate_lambda)

    s = sub.add_parser("export-crops", help="write GT-cropped main-view patches for expert training")
    s.add_argument("root")
    s.add_argument("--categories", help="comma-separated abbreviations (default: challenging set)")
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.set_defaults(func=cmd_export_crops)

    s = sub.add_parser("pseudolabel", help="write auxiliary-view pseudo-labels for detector training")
    s.add_argument("root")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.set_defaults(func=cmd_pseudolabel)

    s = sub.add_parser("run", help="run the dual-view pipeline over a dataset")
    s.add_argument("root")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--strict-union", action="store_true", help="plain union, no cross-source dedup")
    s.add_argument("--conf-threshold", type=float)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="evaluate a detection file against a dataset")
    s.add_argument("dets")
    s.add_argument("root")
    s.add_argument("--iou", type=float, nargs="+", default=[0.5, 0.75])
    s.add_argument("--json")
    s.add_argument("--split")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="re-fuse cached outputs over confidence thresholds")
    s.add_argument("--main", required=True)
    s.add_argument("--aux", required=True, help="cached refined auxiliary detections")
    s.add_argument("--root", required=True)
    s.add_argument("--thresholds", default="0.3:0.1:0.9")
    s.add_argument("--config")
    s.add_argument("--csv")
    s.add_argument("--json")
    s.add_argument("--split")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("synth", help="generate a synthetic paired-view dataset")
    s.add_argument("--spec", help="SceneSpec JSON")
    s.add_argument("--benchmark", choices=["occlusion"], help="preset spec")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dualview-fuse: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args, argv)
    except (BackendFailure, MissingScene) as exc:
        log.error("backend failure: %s", exc)
        return EXIT_BACKEND
    except (DualViewError, ValueError, KeyError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

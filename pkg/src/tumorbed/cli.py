"""Command line entry point: ``tumorbed {synth,infer,evaluate,mine,extent}``.

Exit codes: 0 success, 2 usage/config error, 3 bad input data,
4 classifier protocol failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .geometry import GeometryError, read_polygon, tumor_bed_extent, write_polygon
from .imaging import ImagingError, read_slide_bundle, write_mask_png
from .inference import ClassifierError, InferenceError, ScoreFileClassifier, predict_tumor_bed, write_heatmap_png, write_score_file
from .metrics import MetricsError, evaluate_cohort, load_records, write_report
from .mining import (
    MiningError,
    class_weights,
    minibatch_kmeans,
    no_sample,
    random_sample,
    read_features,
    sample_per_cluster,
    write_plan,
)
from .protocol import ProtocolClassifier, ProtocolError
from .synth import CohortSpec, OracleClassifier, SynthError, cohort_slide_specs, generate_slide, write_manifest, write_synth_slide

log = logging.getLogger("tumorbed")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PROTOCOL = 4


class UsageError(Exception):
    pass


@contextmanager
def staged_output(out_dir: Path):
    """Collect outputs in a temporary sibling directory, then move them in by rename."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir))
    try:
        yield stage
        for item in sorted(stage.iterdir()):
            os.replace(item, out_dir / item.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo_config(stage: Path, cfg: RunConfig, command: str, **inputs) -> None:
    doc = cfg.to_dict()
    _write_json(stage / "resolved_config.json", doc)
    _write_json(stage / "run.json", {"command": command, "inputs": inputs, "version": __version__})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    path = Path(args.spec)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise UsageError(f"spec file not found: {path}") from None
    if not text.strip():
        raise UsageError(f"{path}: empty cohort spec")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or not doc:
        raise UsageError(f"{path}: empty cohort spec")
    # seed precedence: flag, then config file, then the cohort spec; the
    # effective value is echoed so the resolved config replays this run
    if args.seed is not None or _config_sets(args.config, "seed"):
        doc["seed"] = cfg.seed
    doc.setdefault("seed", cfg.seed)
    try:
        cohort = CohortSpec.from_dict(doc)
    except (SynthError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.seed = cohort.seed
    out = Path(cfg.out)
    with staged_output(out) as stage:
        entries = []
        for spec in cohort_slide_specs(cohort):
            synth = generate_slide(spec)
            entries.append(write_synth_slide(stage, synth))
            log.info("synth %s %s", spec.slide_id, synth.label)
        write_manifest(stage, entries, cohort=cohort.to_dict())
        _echo_config(stage, cfg, "synth", spec=str(path))
    print(f"wrote {len(entries)} slides to {out}")
    return EXIT_OK


def _config_sets(path, key: str) -> bool:
    if path is None:
        return False
    return key in json.loads(Path(path).read_text())


def _bundle_paths(target: Path) -> list[Path]:
    if target.is_dir():
        manifest = target / "manifest.json"
        if manifest.exists():
            doc = json.loads(manifest.read_text())
            return [target / e["bundle"] for e in doc["slides"]]
        return sorted(
            p for p in target.glob("*.json")
            if not p.name.endswith((".gt.json", ".pred.json")) and p.name not in ("manifest.json", "resolved_config.json", "run.json")
        )
    return [target]


def _classifier_for(cfg: RunConfig, bundle: Path, slide_id: str):
    spec = cfg.classifier
    if spec == "oracle":
        gt_path = bundle.parent / f"{slide_id}.gt.json"
        if not gt_path.exists():
            raise UsageError(f"oracle classifier needs ground truth {gt_path}")
        _, _, poly = read_polygon(gt_path)
        return OracleClassifier(poly, cfg.oracle_config())
    kind, _, arg = spec.partition(":")
    if kind == "scores":
        p = Path(arg)
        return ScoreFileClassifier(p / f"{slide_id}.scores.txt" if p.is_dir() else p)
    return ProtocolClassifier(arg, timeout=cfg.protocol_timeout)


def cmd_infer(args, cfg: RunConfig) -> int:
    bundles = _bundle_paths(Path(args.input))
    if not bundles:
        raise ImagingError(f"no slide bundles under {args.input}")
    out = Path(cfg.out)
    icfg = cfg.inference()
    summary = []
    with staged_output(out) as stage:
        for bundle in bundles:
            slide = read_slide_bundle(bundle, cfg.mpp)
            clf = _classifier_for(cfg, bundle, slide.slide_id)
            try:
                pred = predict_tumor_bed(slide, clf, icfg)
            finally:
                if isinstance(clf, ProtocolClassifier):
                    clf.close()
            sid = slide.slide_id
            write_heatmap_png(stage / f"{sid}.heatmap.png", pred.heatmap, cfg.tau)
            heat_meta = json.loads((stage / f"{sid}.heatmap.json").read_text())
            heat_meta["vote_count"] = pred.heatmap.vote_count.tolist()
            _write_json(stage / f"{sid}.heatmap.json", heat_meta)
            write_mask_png(stage / f"{sid}.mask.png", pred.mask, tau=cfg.tau)
            write_score_file(stage / f"{sid}.scores.txt", pred.scores)
            write_polygon(
                stage / f"{sid}.pred.json",
                sid,
                slide.mpp,
                pred.hull if pred.extent is not None else None,
                label=pred.label,
                width=slide.width,
                height=slide.height,
                extent=None if pred.extent is None else pred.extent.to_dict(),
                n_scored=len(pred.scores),
            )
            summary.append({
                "slide_id": sid,
                "label": pred.label,
                "d_prim_mm": None if pred.extent is None else pred.extent.d_prim_mm,
            })
            log.info("infer %s %s", sid, pred.label)
        _write_json(stage / "predictions.json", {"slides": summary})
        _echo_config(stage, cfg, "infer", input=str(args.input))
    print(f"predicted {len(summary)} slides into {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    preds = load_records(args.predictions, ".pred.json")
    gts = load_records(args.ground_truth, ".gt.json")
    if not gts:
        raise MetricsError(f"empty cohort: no ground truth under {args.ground_truth}")
    report = evaluate_cohort(preds, gts, cfg.dice_cell_size)
    out = Path(cfg.out)
    with staged_output(out) as stage:
        write_report(stage, report, args.sampling, args.weighting)
        _echo_config(stage, cfg, "evaluate", predictions=str(args.predictions), ground_truth=str(args.ground_truth))
    print(report.render_table(args.sampling, args.weighting))
    return EXIT_OK


def cmd_mine(args, cfg: RunConfig) -> int:
    m = cfg.mining
    feats = read_features(args.features)
    if m.strategy == "kmeans":
        model = minibatch_kmeans(feats, m.k, m.batch_size, m.max_iters, cfg.seed, m.tol)
        plan = sample_per_cluster(model, feats, m.m)
    elif m.strategy == "random":
        plan = random_sample(feats.ids, m.m_total, cfg.seed)
    else:
        plan = no_sample()
    if args.class_counts:
        counts = [int(c) for c in args.class_counts.split(",")]
        plan.weights = dict(zip(("negative", "positive"), class_weights(counts, m.weighting)))
    out = Path(cfg.out)
    with staged_output(out) as stage:
        write_plan(stage / "plan.txt", plan)
        _echo_config(stage, cfg, "mine", features=str(args.features), class_counts=args.class_counts)
    print(f"{plan.strategy}: selected {len(plan)} patches -> {out / 'plan.txt'}")
    return EXIT_OK


def cmd_extent(args, cfg: RunConfig) -> int:
    slide_id, mpp, poly = read_polygon(args.polygon)
    mpp = cfg.mpp if cfg.mpp is not None else mpp
    if poly is None:
        raise GeometryError("extent undefined: polygon has no vertices")
    ext = tumor_bed_extent(poly.vertices, mpp)
    record = {"slide_id": slide_id, **ext.to_dict()}
    if args.out is not None or _config_sets(args.config, "out"):
        out = Path(cfg.out)
        with staged_output(out) as stage:
            _write_json(stage / f"{slide_id}.extent.json", record)
            _echo_config(stage, cfg, "extent", polygon=str(args.polygon))
    print(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags override it)")
    common.add_argument("--stride", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--classifier", help="oracle | scores:PATH | proto:ADDR")
    common.add_argument("--mpp", type=float, help="override slide microns per pixel")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tumorbed", description="Tumor-bed estimation for whole-slide images.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic slide cohort")
    p.add_argument("spec", help="cohort spec (JSON)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("infer", parents=[common], help="predict tumor beds for slide bundles")
    p.add_argument("input", help="slide bundle (.json sidecar) or a directory of bundles")
    p.add_argument("--side", type=int)
    p.add_argument("--fg-threshold", type=float)
    p.add_argument("--p-fp", type=float, help="oracle false-positive rate")
    p.add_argument("--p-fn", type=float, help="oracle false-negative rate")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p.add_argument("predictions")
    p.add_argument("ground_truth")
    p.add_argument("--dice-cell-size", type=int)
    p.add_argument("--sampling", default="-", help="label for the table's sampling column")
    p.add_argument("--weighting", default="-", help="label for the table's weighting column")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mine", parents=[common], help="select negative patches from a feature file")
    p.add_argument("features")
    p.add_argument("--strategy", choices=["kmeans", "random", "none"])
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--m-total", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--weighting", choices=["prop", "inv_prop", "equal"])
    p.add_argument("--class-counts", help="NEG,POS counts for loss weights")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("extent", parents=[common], help="d1, d2 and d_prim of a polygon document")
    p.add_argument("polygon")
    p.set_defaults(func=cmd_extent)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    flags = {
        "stride": args.stride,
        "tau": args.tau,
        "seed": args.seed,
        "classifier": args.classifier,
        "mpp": args.mpp,
        "out": args.out,
        "side": getattr(args, "side", None),
        "fg_threshold": getattr(args, "fg_threshold", None),
        "workers": getattr(args, "workers", None),
        "dice_cell_size": getattr(args, "dice_cell_size", None),
        "oracle.p_fp": getattr(args, "p_fp", None),
        "oracle.p_fn": getattr(args, "p_fn", None),
        "mining.strategy": getattr(args, "strategy", None),
        "mining.k": getattr(args, "k", None),
        "mining.m": getattr(args, "m", None),
        "mining.m_total": getattr(args, "m_total", None),
        "mining.batch_size": getattr(args, "batch_size", None),
        "mining.max_iters": getattr(args, "max_iters", None),
    }
    if args.command == "mine":
        flags["mining.weighting"] = getattr(args, "weighting", None)
    try:
        return apply_overrides(cfg, **flags)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"tumorbed: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, ClassifierError) as exc:
        print(f"tumorbed: classifier failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (GeometryError, ImagingError, InferenceError, MetricsError, MiningError, SynthError, OSError) as exc:
        print(f"tumorbed: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

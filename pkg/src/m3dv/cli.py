"""Command-line entry point: matching, noise generation, training, diagnostics, evaluation."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config
from .denoising import draw_noisy_sets, noisy_object_to_dict
from .evaluation import UndefinedAPError, ap_table, filter_by_confidence
from .geometry import Box3D, GeometryError, default_calibration, iou_3d, iou_bev
from .kitti_io import (
    DEFAULT_IMAGE_SIZE, ParseError, Scene, generate_scenes, make_object, parse_calib_file, parse_label_file,
)
from .matching import Prediction, match
from .model import VARIANTS, TrainingDiverged, train

EXIT_ERROR = 1
EXIT_MISSING = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {path}", EXIT_MISSING)
    return p.read_text()


def _config(args, **cli_values) -> ScenarioConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise CliError(f"file not found: {args.config}", EXIT_MISSING)
    cli_values["seed"] = getattr(args, "seed", None)
    return load_config(args.config, cli_values, desk=args.desk)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


def _labels(path: str, cfg: ScenarioConfig, calib_path: str | None = None):
    calib = parse_calib_file(_read(calib_path)) if calib_path else None
    return parse_label_file(_read(path), calib, num_bins=cfg.num_bins, categories=cfg.categories), calib


# -- subcommands ----------------------------------------------------------------------

def cmd_match(args) -> int:
    cfg = _config(args)
    gts, _ = _labels(args.gt, cfg, args.calib)
    raw_preds, _ = _labels(args.pred, cfg, args.calib)
    preds = [Prediction.from_object(o, cfg.categories, cfg.num_bins) for o in raw_preds]
    assignment, cm = match(preds, gts, args.epoch, cfg.matching())
    _emit({
        "epoch": args.epoch,
        "gamma": cm.gamma,
        "assignment": [list(p) for p in assignment.pairs],
        "unmatched": assignment.unmatched,
        "total_cost": assignment.total,
        "pairs": [{"pred": p, "gt": g, "cost": float(cm.values[p, g]), "components": cm.breakdown(p, g)}
                  for p, g in assignment.pairs],
    })
    return 0


def cmd_dn_gen(args) -> int:
    cfg = _config(args)
    objs, calib = _labels(args.labels, cfg, args.calib)
    scene = Scene(objs, calib) if calib is not None else Scene(objs)
    draw = draw_noisy_sets(scene, args.groups or cfg.G, cfg.noise(), np.random.default_rng(cfg.seed))
    _emit({
        "seed": cfg.seed, "G": draw.G, "C": draw.C, "K": draw.K,
        "target_index": draw.target_index.tolist(),
        "groups": [[noisy_object_to_dict(o) for o in g] for g in draw.objects],
        "anchors": draw.anchors.tolist(),
    })
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    scenes = generate_scenes(cfg.seed, args.scenes, (1, 3))
    result = train(scenes, cfg.decoder(), cfg.train(), args.variant, out_dir=args.out)
    out = Path(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    last = result.metrics[-1] if result.metrics else {}
    _emit({"out": str(out), "variant": args.variant, "seed": cfg.seed, "epochs": len(result.metrics),
           "final": {k: last[k] for k in ("L_total", "L_det", "L_res", "L_KL", "L_dis", "entropy") if k in last}})
    return 0


def _read_run(run_dir: str) -> tuple[str, str, list[dict]]:
    path = Path(run_dir)
    metrics = path / "metrics.csv"
    if not metrics.is_file():
        raise CliError(f"file not found: {metrics}", EXIT_MISSING)
    manifest_path = path / "manifest.json"
    variant = ""
    if manifest_path.is_file():
        variant = json.loads(manifest_path.read_text()).get("entropy_variant", "")
    with open(metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return path.name, variant, rows


def cmd_diag_entropy(args) -> int:
    """Long format: one row per (epoch, run) over the union of epochs; absent epochs are left blank."""
    runs = [_read_run(r) for r in args.runs]
    layers = 0
    for _, _, rows in runs:
        if rows:
            layers = max(layers, sum(1 for k in rows[0] if k.startswith("entropy_layer_")))
    by_epoch = [{int(r["epoch"]): r for r in rows} for _, _, rows in runs]
    epochs = sorted(set().union(*by_epoch)) if by_epoch else []
    fields = ["epoch", "run", "variant", "mean_entropy", "entropy_n2l"] + [f"layer_{i}" for i in range(layers)]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for e in epochs:
        for (name, variant, _), table in zip(runs, by_epoch):
            r = table.get(e, {})
            row = {"epoch": e, "run": name, "variant": variant, "mean_entropy": r.get("entropy", ""),
                   "entropy_n2l": r.get("entropy_n2l", "")}
            for i in range(layers):
                row[f"layer_{i}"] = r.get(f"entropy_layer_{i}", "")
            w.writerow(row)
    _write_text(buf.getvalue(), args.out)
    return 0


def _write_text(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _detection(d: dict, cfg: ScenarioConfig):
    try:
        return make_object(d["category"], tuple(d["location"]), tuple(d["dims"]), float(d["yaw"]),
                           tuple(d.get("bbox_px", (0.0, 0.0, 0.0, 0.0))), default_calibration(),
                           DEFAULT_IMAGE_SIZE, cfg.num_bins, score=float(d["score"]))
    except (KeyError, TypeError) as exc:
        raise CliError(f"malformed detection {d!r}: {exc}") from None


def cmd_eval(args) -> int:
    """Detections JSON maps a scene id to a list of {category, location, dims (l,w,h), yaw, score}."""
    cfg = _config(args)
    try:
        raw = json.loads(_read(args.dets))
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.dets}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise CliError(f"{args.dets}: expected an object mapping scene ids to detection lists")
    labels_dir = Path(args.labels)
    if not labels_dir.is_dir():
        raise CliError(f"directory not found: {args.labels}", EXIT_MISSING)
    ids = sorted(p.stem for p in labels_dir.glob("*.txt"))
    missing = sorted(set(raw) - set(ids))
    if missing:
        raise CliError(f"detections for scenes without labels: {', '.join(missing)}")
    gts = [parse_label_file((labels_dir / f"{i}.txt").read_text(), num_bins=cfg.num_bins) for i in ids]
    dets = [filter_by_confidence([_detection(d, cfg) for d in raw.get(i, [])], args.tau) for i in ids]
    fns = {"3d": iou_3d, "bev": iou_bev}
    if args.metric != "both":
        fns = {args.metric: fns[args.metric]}
    rows = ap_table(dets, gts, fns, args.thresholds, args.categories or list(cfg.categories))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["category", "metric", "iou_threshold", "ap_r40"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "ap_r40": f"{r['ap_r40']:.4f}"})
    _write_text(buf.getvalue(), args.out)
    return 0


def cmd_iou(args) -> int:
    a = Box3D(tuple(args.box_a[:3]), tuple(args.box_a[3:6]), args.box_a[6])
    b = Box3D(tuple(args.box_b[:3]), tuple(args.box_b[3:6]), args.box_b[6])
    _emit({"iou_3d": iou_3d(a, b), "iou_bev": iou_bev(a, b)})
    return 0


def cmd_gradcheck(args) -> int:
    from .model.check import decoder_gradcheck, op_suite
    cfg = _config(args)
    ops_err = op_suite(cfg.seed)
    report = {"seed": cfg.seed, "ops": ops_err, "ops_max": max(ops_err.values())}
    if not args.skip_decoder:
        dec = decoder_gradcheck(cfg.seed)
        report["decoder"] = {"max_rel_error": dec.max_rel_error, "max_abs_error": dec.max_abs_error,
                             "worst_parameter": dec.worst_parameter, "parameters": dec.parameters,
                             "seconds": round(dec.seconds, 2)}
    _emit(report)
    return 0


# -- parser ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="flat JSON scenario config")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale defaults")
    if seed:
        p.add_argument("--seed", type=int, help="overrides the config and M3DV_SEED")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3dv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="3D-aware bipartite matching between two label files")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--calib")
    _common(p, seed=False)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("dn-gen", help="dump perturbed ground truth and anchors as JSON")
    p.add_argument("--labels", required=True)
    p.add_argument("--calib")
    p.add_argument("--groups", type=int, help="number of groups G (defaults to the config)")
    _common(p)
    p.set_defaults(func=cmd_dn_gen)

    p = sub.add_parser("train", help="train on synthetic scenes")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diag-entropy", help="merge entropy curves of several runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag_entropy)

    p = sub.add_parser("eval", help="AP@R40 table as CSV")
    p.add_argument("--dets", required=True)
    p.add_argument("--labels", required=True, help="directory of <scene>.txt label files")
    p.add_argument("--metric", choices=("3d", "bev", "both"), default="both")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.7])
    p.add_argument("--categories", nargs="+")
    p.add_argument("--tau", type=float, default=0.0, help="confidence filter applied before matching")
    p.add_argument("--out")
    _common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("iou", help="IoU3D and BEV IoU of two boxes given as x y z l w h yaw")
    p.add_argument("--box-a", type=float, nargs=7, required=True, metavar="V")
    p.add_argument("--box-b", type=float, nargs=7, required=True, metavar="V")
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("gradcheck", help="finite-difference checks of ops and the desk decoder")
    p.add_argument("--skip-decoder", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ParseError, GeometryError, UndefinedAPError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

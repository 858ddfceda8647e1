"""Command-line entry point: ``pneumoseg <command> [options]``.

Exit status: 0 success, 1 operational error, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

OPS_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4

log = logging.getLogger("pneumoseg")


class UsageError(Exception):
    pass


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pneumoseg", description="Two-stage chest X-ray segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("stats", help="label/metadata statistics of an image folder")
    s.add_argument("--data", required=True, help="folder with .dcm/.pgm images (or an images/ subfolder)")
    s.add_argument("--labels", help="annotation CSV (default: <data>/annotations.csv)")
    s.add_argument("--format", choices=("text", "csv"), default="text", help="output format (default: text)")

    s = sub.add_parser("rle-encode", help="encode a binary mask image as one CSV row")
    s.add_argument("--mask", required=True, help="PGM mask; nonzero pixels are foreground")
    s.add_argument("--id", help="image id (default: file stem)")
    s.add_argument("--order", choices=("column", "row"), default="column", help="pixel order (default: column)")

    s = sub.add_parser("rle-decode", help="decode annotation rows into PGM masks")
    s.add_argument("--csv", required=True, help="annotation or submission CSV")
    s.add_argument("--height", type=int, default=1024, help="mask height (default: 1024)")
    s.add_argument("--width", type=int, default=1024, help="mask width (default: 1024)")
    s.add_argument("--id", help="decode only this image id (default: all)")
    s.add_argument("--out", required=True, help="output folder for <id>.pgm (0/255 masks)")
    s.add_argument("--order", choices=("column", "row"), default="column", help="pixel order (default: column)")

    s = sub.add_parser("train", help="run a training experiment")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="experiment YAML file (default: none; exclusive with --preset)")
    src.add_argument("--preset", choices=("exp1", "exp2", "exp3", "exp4", "exp5"), help="built-in experiment (default: none; exclusive with --config)")
    s.add_argument("--data", required=True, help="dataset folder (images/ + annotations.csv)")
    s.add_argument("--out", required=True, help="output folder for checkpoints and logs")
    s.add_argument("--seed", type=int, help="override the config seed (default: config value)")
    s.add_argument("--desk-scale", action="store_true",
                   help="width 0.25, 64/128 px, 5+3 epochs (default: off)")
    s.add_argument("--stage1-checkpoint", help="skip stage 1 and start stage 2 from this file (default: train stage 1)")
    s.add_argument("--dry-run", action="store_true",
                   help="write resolved_config.yaml and stop before training (default: off)")

    s = sub.add_parser("predict", help="write a submission CSV for a folder of images")
    s.add_argument("--checkpoint", required=True, help="model checkpoint (.nts)")
    s.add_argument("--input", required=True, help="folder of .dcm/.pgm images")
    s.add_argument("--out", required=True, help="submission CSV path")
    s.add_argument("--b-th", type=float, default=0.75, help="binarization threshold (default: 0.75)")
    s.add_argument("--r-th", type=int, default=2048, help="removal threshold in pixels (default: 2048)")
    s.add_argument("--tta", type=_bool, nargs="?", const=True, default=True,
                   help="horizontal-flip averaging, true/false (default: true)")
    s.add_argument("--removal-mode", choices=("whole", "components"), default="whole",
                   help="drop small whole masks or small components (default: whole)")
    s.add_argument("--connectivity", type=int, choices=(4, 8), default=4,
                   help="component connectivity (default: 4)")
    s.add_argument("--resolution", type=int, default=512, help="model input size (default: 512)")
    s.add_argument("--output-resolution", type=int, default=1024, help="submission mask size (default: 1024)")

    s = sub.add_parser("evaluate", help="mean DSC / IoU of predictions against truth")
    s.add_argument("--pred", required=True, help="prediction CSV")
    s.add_argument("--truth", required=True, help="ground-truth CSV")
    s.add_argument("--height", type=int, default=1024, help="mask height (default: 1024)")
    s.add_argument("--width", type=int, default=1024, help="mask width (default: 1024)")
    s.add_argument("--report", help="also write the per-image table as CSV here (default: none)")

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")

    s = sub.add_parser("fixtures", help="generate synthetic test data")
    s.add_argument("--out", required=True, help="output folder")
    s.add_argument("--kind", choices=("all", "blobs", "dicom", "golden"), default="all",
                   help="what to generate (default: all)")
    s.add_argument("--n", type=int, default=200, help="blob images (default: 200)")
    s.add_argument("--size", type=int, default=64, help="blob image size (default: 64)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    return p


def cmd_stats(args):
    from . import rle
    from .ingest import dataset_stats, list_images, load_image
    from .synthetic import ANNOTATIONS, IMAGES

    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data folder {data} does not exist")
    img_dir = data / IMAGES if (data / IMAGES).is_dir() else data
    labels = Path(args.labels) if args.labels else data / ANNOTATIONS
    if not labels.exists():
        raise UsageError(f"annotation CSV {labels} not found")
    groups = rle.group_by_image(rle.iter_annotation_csv(labels))
    counts = {k: sum(not r.is_empty for r in v) for k, v in groups.items()}
    records = []
    for path in list_images(img_dir):
        ds = load_image(path)
        if ds.image_id not in groups:
            log.warning("%s has no annotation row; skipped", ds.image_id)
            continue
        records.append((ds, counts[ds.image_id] > 0))
    report = dataset_stats(records, counts)
    sys.stdout.write(report.to_text() if args.format == "text" else report.to_csv())
    return 0


def cmd_rle_encode(args):
    from . import rle
    from .ingest import read_pgm

    path = Path(args.mask)
    mask = (read_pgm(path.read_bytes()) > 0).astype(np.uint8)
    rec = rle.rle_encode(mask, args.id or path.stem, args.order)
    print(f"{rec.image_id},{rec.payload()}")
    return 0


def cmd_rle_decode(args):
    from . import rle
    from .ingest import write_pgm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = rle.group_by_image(rle.iter_annotation_csv(args.csv))
    if args.id is not None:
        if args.id not in groups:
            raise UsageError(f"image id {args.id!r} not in {args.csv}")
        groups = {args.id: groups[args.id]}
    for image_id, recs in groups.items():
        mask = rle.union_masks(recs, args.height, args.width, args.order)
        (out / f"{image_id}.pgm").write_bytes(write_pgm(mask * 255))
    print(f"wrote {len(groups)} mask(s) to {out}")
    return 0


def cmd_train(args):
    from . import train

    if not Path(args.data).is_dir():
        raise UsageError(f"data folder {args.data} does not exist")
    try:
        cfg = train.load_config(args.config) if args.config else train.preset(args.preset)
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None
    except train.ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.desk_scale:
        cfg = train.desk_scale(cfg)

    if args.dry_run:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.yaml").write_text(cfg.to_yaml())
        print(f"resolved config written to {out / 'resolved_config.yaml'}")
        return 0

    def progress(row):
        log.info("stage %d epoch %d lr %.3g train %.4f val %.4f iou %.4f", row["stage"], row["epoch"], row["lr"],
                 row["train_loss"], row["val_loss"], row["val_iou"])

    result = train.run_experiment(cfg, args.data, args.out, stage1_checkpoint=args.stage1_checkpoint,
                                  progress=progress)
    last = result.stages[-1] if result.stages else None
    if last is not None:
        print(f"{cfg.name}: stage {last.stage} val DSC {last.val['val_dsc']:.4f} IoU {last.val['val_iou']:.4f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_predict(args):
    from .inference import PredictConfig, list_inputs, predict_to_submission
    from .model import load_checkpoint

    inputs = Path(args.input)
    if not inputs.is_dir():
        raise UsageError(f"input folder {inputs} does not exist")
    paths = list_inputs(inputs)
    if not paths:
        raise UsageError(f"no .dcm or .pgm images in {inputs}")
    try:
        cfg = PredictConfig(b_th=args.b_th, r_th=args.r_th, tta=args.tta, removal_mode=args.removal_mode,
                            connectivity=args.connectivity, resolution=args.resolution,
                            output_resolution=args.output_resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = load_checkpoint(args.checkpoint)
    result = predict_to_submission(model, paths, cfg, args.out)
    print(f"wrote {len(result.records)} row(s) to {args.out}; latency {result.latency_summary()}")
    for path, msg in result.failures:
        print(f"failed: {path}: {msg}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_evaluate(args):
    from .inference import evaluate

    report = evaluate(args.pred, args.truth, args.height, args.width)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    print(f"images {len(report.rows)}")
    print(f"mean DSC {report.mean_dsc:.4f}")
    print(f"mean IoU {report.mean_iou:.4f}")
    return 0


def cmd_gradcheck(args):
    from .tensor import gradcheck, kernels

    results = gradcheck.full_suite(args.seed)
    ok = True
    print(f"kernel backend: {kernels.BACKEND}")
    for name, err in results.items():
        tol = END_TO_END_TOLERANCE if name.endswith("end_to_end") else OPS_TOLERANCE
        passed = err < tol
        ok &= passed
        print(f"{name:<32} {err:.3e}  {'ok' if passed else 'FAIL'} (< {tol:g})")
    return 0 if ok else 1


def cmd_fixtures(args):
    from . import synthetic

    out = Path(args.out)
    if args.kind in ("all", "blobs"):
        synthetic.write_blob_dataset(out / "blobs" if args.kind == "all" else out, args.n, args.size, args.seed)
    if args.kind in ("all", "dicom"):
        synthetic.write_dicom_dataset(out / "dicom" if args.kind == "all" else out, seed=args.seed)
    if args.kind in ("all", "golden"):
        synthetic.write_golden_csvs(out / "golden" if args.kind == "all" else out, seed=args.seed)
    print(f"fixtures written to {out}")
    return 0


COMMANDS = {
    "stats": cmd_stats, "rle-encode": cmd_rle_encode, "rle-decode": cmd_rle_decode, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pneumoseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"pneumoseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

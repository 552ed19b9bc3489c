"""Command line entry point: ``cddgan <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from cddgan.data_ingest import (
    DatasetNotFoundError,
    SliceDataset,
    build_slice_dataset,
    load_decathlon_hippocampus,
    split_patients,
)
from cddgan.distortion import distort_dataset
from cddgan.domain_transfer import transform_dataset
from cddgan.domains import Domain
from cddgan.evaluation import (
    DATASET_KEYS,
    ClassifierTrainConfig,
    MethodResult,
    MetricsReport,
    classification_score,
    emit_report,
    evaluate_segmenter,
    sample_panels,
)
from cddgan.gan_training import GanTrainConfig, TrainingDivergence, train_gan
from cddgan.metrics import dice
from cddgan.networks import load_checkpoint
from cddgan.pipeline import STAGES, TOY, ExperimentConfig, MissingDependency, make_toy_fixture, run_pipeline
from cddgan.segmentation import SegTrainConfig, ground_truth_volume, predict_volume, retrain_unet, train_unet

EXIT_MISSING = 2
EXIT_DIVERGED = 3


def _read_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _load_generator(path):
    g, payload = load_checkpoint(path, expect_kind="generator")
    g.checkpoint_id = payload["param_hash"]
    return g


def cmd_prepare(args):
    volumes = make_toy_fixture(args.seed) if args.root == TOY else load_decathlon_hippocampus(args.root)
    split = split_patients(volumes, args.seed)
    build_slice_dataset(volumes, split, args.seed, Domain.O).save(args.out)
    print(f"{len(volumes)} patients, split {split.sizes()} -> {args.out}")


def cmd_distort(args):
    ds = distort_dataset(SliceDataset.load(args.input), args.kind, args.seed)
    ds.save(args.output)
    print(f"{args.kind}: {len(ds)} slices -> {args.output}")


def cmd_train_gan(args):
    if len(args.data) != 3:
        raise SystemExit("--data needs the O, C and E dataset directories")
    parts = [SliceDataset.load(d).subset("train") for d in args.data]
    config = GanTrainConfig.for_variant(args.variant, **_read_config(args.config))
    _, _, rows = train_gan(config, SliceDataset.concat(parts), out_dir=args.out)
    print(f"{args.variant}: {len(rows)} steps -> {args.out}")


def cmd_transform(args):
    g = _load_generator(args.generator)
    ds = transform_dataset(g, SliceDataset.load(args.data), Domain(args.target))
    ds.save(args.out)
    print(f"{len(ds)} slices -> {args.out}")


def cmd_train_unet(args):
    data = SliceDataset.load(args.data)
    config = SegTrainConfig(**_read_config(args.config))
    _, history = train_unet(data.subset("train"), data.subset("val"), config, out_dir=args.out)
    print(f"best validation Dice {history['best_val_dice']:.4f} -> {args.out}")


def cmd_retrain_unet(args):
    g = _load_generator(args.generator)
    config = SegTrainConfig(**_read_config(args.config))
    _, history = retrain_unet(g, SliceDataset.load(args.data), config, out_dir=args.out)
    print(f"best validation Dice {history['best_val_dice']:.4f} -> {args.out}")


def cmd_predict(args):
    import nibabel as nib

    model, _ = load_checkpoint(args.model, expect_kind="unet")
    data = SliceDataset.load(args.data)
    if args.split != "all":
        data = data.subset(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for pid, idx in data.patient_indices().items():
        slices = [data[i] for i in idx]
        pred = predict_volume(model, slices)
        nib.save(nib.Nifti1Image(pred, np.eye(4)), out / f"{pid}.nii.gz")
        rows.append((pid, dice(pred, ground_truth_volume(slices))))
    with open(out / "dice.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("patient_id", "dice"))
        writer.writerows(rows)
    print(f"{len(rows)} volumes, mean Dice {np.mean([r[1] for r in rows]):.4f} -> {out}")


def cmd_evaluate(args):
    if len(args.data) != 3:
        raise SystemExit("--data needs the O, C and E dataset directories")
    seg, payload = load_checkpoint(args.segmenter, expect_kind="unet")
    raw = {k: SliceDataset.load(d) for k, d in zip(DATASET_KEYS, args.data)}
    shown = raw
    if args.generator != "none":
        g = _load_generator(args.generator)
        shown = {k: transform_dataset(g, d, Domain.O) for k, d in raw.items()}
    scores = evaluate_segmenter(seg, shown, split=args.split)
    cls = classification_score(
        [shown[k] for k in DATASET_KEYS], args.seed, ClassifierTrainConfig(epochs=args.classifier_epochs)
    )
    name = args.name or ("UNet" if args.generator == "none" else "UNet+generator")
    report = MetricsReport(
        methods={name: MethodResult(
            dice={k: v[0] for k, v in scores.items()},
            classification_score=cls,
            per_subject={k: v[1] for k, v in scores.items()},
        )},
        provenance={"segmenter": payload["param_hash"], "generator": args.generator, "seed": args.seed},
    )
    emit_report(report, {name: sample_panels(seg, raw, shown)}, args.out)
    print(json.dumps(report.methods[name].row(), indent=2))


def cmd_run(args):
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_root = args.out
    status = run_pipeline(config, stages=args.stages or None, force=args.force)
    for stage, state in status.items():
        print(f"{stage:>13}: {state}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cddgan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="slice and split the MSD hippocampus data (or the toy fixture)")
    p.add_argument("--root", required=True, help=f"MSD Task04_Hippocampus directory, or '{TOY}'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("distort", help="build H_C or H_E from H_O")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=("contrast", "elastic"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("train-gan")
    p.add_argument("--variant", choices=("cddgan", "drgan"), required=True)
    p.add_argument("--data", nargs=3, required=True, metavar=("O", "C", "E"))
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("transform")
    p.add_argument("--generator", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="O", choices=[d.value for d in Domain])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train-unet")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_unet)

    p = sub.add_parser("retrain-unet")
    p.add_argument("--generator", required=True)
    p.add_argument("--data", required=True, help="H_O dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrain_unet)

    p = sub.add_parser("predict")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate")
    p.add_argument("--segmenter", required=True)
    p.add_argument("--generator", default="none")
    p.add_argument("--data", nargs=3, required=True, metavar=("O", "C", "E"))
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classifier-epochs", type=int, default=20)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run pipeline stages from an experiment config")
    p.add_argument("--config")
    p.add_argument("--stages", nargs="*", choices=STAGES)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (MissingDependency, DatasetNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Subcommands: synth, build-model, regulate, train, eval, ablate.  Every
command writes a run manifest next to its outputs and is a pure function of
its arguments and input files; outputs carry no timestamps, so re-running a
command reproduces its outputs byte for byte.

Exit codes: 0 success, 2 usage or validation failure, 3 numeric failure
(degenerate geometry or a shape prior that rejects every sample).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import load_checkpoint, save_checkpoint
from .datafiles import (load_dataset, load_predictions, read_json,
                        save_dataset, save_predictions, save_pseudo_labels,
                        write_json)
from .errors import AllSamplesSkipped, DegenerateShape, ShapeRegError
from .geometry import flatten
from .pipeline import (Ablation, AugmentConfig, Dataset, Metrics, TrainConfig,
                       TrainState, evaluate, init_state, run_training)
from .regulation import regulate
from .shape_model import (build_shape_model, load_model, project, save_model,
                          shapiro_wilk)
from .synth import GeneratorSpec, generate

EXIT_USAGE = 2
EXIT_NUMERIC = 3

ARM_ORDER = [Ablation.FULL, Ablation.NO_SR, Ablation.NO_RAL,
             Ablation.NO_SR_NO_RAL, Ablation.SUPERVISED_ONLY]


# ---------------------------------------------------------------- config

def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "epochs_per_stage": cfg.epochs_per_stage,
        "z_mm": cfg.z_mm,
        "variance_target": cfg.variance_target,
        "offset_mean": cfg.offset_mean,
        "offset_std": cfg.offset_std,
        "lr": cfg.lr,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "eps": cfg.eps,
        "seed": cfg.seed,
        "ablation": cfg.ablation.value,
        "batch_size": cfg.batch_size,
        "finetune_loss": cfg.finetune_loss,
        "augment": {
            "max_translate": cfg.augment.max_translate,
            "max_rotate_rad": cfg.augment.max_rotate_rad,
            "noise_std": cfg.augment.noise_std,
        },
        "snapshot_every": cfg.snapshot_every,
    }


def config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    aug = doc.pop("augment", {})
    return TrainConfig(augment=AugmentConfig(**aug), **doc)


def resolve_config(args) -> TrainConfig:
    """Defaults < config file < explicit CLI flags."""
    doc = config_to_dict(TrainConfig())
    if getattr(args, "config", None):
        file_doc = read_json(args.config)
        aug = {**doc["augment"], **file_doc.pop("augment", {})}
        doc.update(file_doc)
        doc["augment"] = aug
    overrides = {
        "epochs_per_stage": args.epochs,
        "z_mm": args.z_mm,
        "variance_target": args.variance_target,
        "lr": args.lr,
        "seed": args.seed,
        "ablation": args.ablation,
        "batch_size": args.batch_size,
        "finetune_loss": args.finetune_loss,
        "snapshot_every": args.snapshot_every,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    for key, flag in (("max_translate", args.max_translate),
                      ("max_rotate_rad", args.max_rotate_rad),
                      ("noise_std", args.noise_std)):
        if flag is not None:
            doc["augment"][key] = flag
    return config_from_dict(doc)


# ---------------------------------------------------------------- helpers

def _split_dataset(samples, n_labeled: int, n_unlabeled: int,
                   n_test: int | None) -> Dataset:
    total = len(samples)
    if n_test is None:
        n_test = total - n_labeled - n_unlabeled
    if n_labeled < 2:
        raise ValueError("need at least 2 labeled samples")
    if n_labeled + n_unlabeled + n_test > total:
        raise ValueError(f"split {n_labeled}+{n_unlabeled}+{n_test} exceeds "
                         f"dataset size {total}")
    labeled = samples[:n_labeled]
    unlabeled = samples[n_labeled:n_labeled + n_unlabeled]
    held_out = samples[n_labeled + n_unlabeled:n_labeled + n_unlabeled + n_test]
    return Dataset(
        labeled=labeled,
        unlabeled=[img for img, _ in unlabeled],
        held_out=held_out,
        unlabeled_truth=[ls for _, ls in unlabeled] or None,
    )


def metrics_to_dict(metrics: Metrics) -> dict:
    return {
        "mre_mm": metrics.mre_mm,
        "sd_mm": metrics.sd_mm,
        "n_predictions": metrics.n_predictions,
        "outliers": [
            {"radius_mm": r, "count": c, "percent": p}
            for r, (c, p) in sorted(metrics.outliers.items())
        ],
    }


def metrics_table(metrics: Metrics) -> str:
    radii = sorted(metrics.outliers)
    header = "MRE(SD) mm".ljust(18) + "".join(
        f"O_{r:g}mm".ljust(16) for r in radii)
    row = f"{metrics.mre_mm:.4f}({metrics.sd_mm:.4f})".ljust(18) + "".join(
        f"{metrics.outliers[r][0]} ({metrics.outliers[r][1]:.2f}%)".ljust(16)
        for r in radii)
    return header + "\n" + row


def write_run_manifest(out_dir: Path, command: str, payload: dict) -> None:
    doc = {"tool_version": __version__, "command": command, **payload}
    write_json(out_dir / "run_manifest.json", doc)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.count < 1:
        raise ValueError("--count must be at least 1")
    spec = GeneratorSpec(n_landmarks=args.n_landmarks,
                         image_size=args.image_size,
                         spacing_mm=args.spacing_mm, seed=args.seed)
    samples = generate(spec, args.count)
    out_dir = Path(args.out)
    manifest = save_dataset(out_dir, spec, samples)
    write_run_manifest(out_dir, "synth", {
        "seed": args.seed, "count": args.count,
        "n_landmarks": args.n_landmarks, "image_size": args.image_size,
        "spacing_mm": args.spacing_mm,
    })
    print(f"wrote {args.count} samples to {manifest}")
    return 0


def cmd_build_model(args) -> int:
    _, samples = load_dataset(args.data)
    count = args.count if args.count is not None else len(samples)
    landmark_sets = [ls for _, ls in samples[:count]]
    model = build_shape_model(landmark_sets, args.variance_target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)

    coeffs = np.array([project(model, flatten(ls)).values
                       for ls in landmark_sets])
    total_var = float(model.sigmas @ model.sigmas) / model.variance_fraction
    modes = []
    for k in range(model.n_modes):
        entry = {
            "sigma": float(model.sigmas[k]),
            "explained_variance_fraction": float(model.sigmas[k] ** 2 / total_var),
        }
        try:
            w, p = shapiro_wilk(coeffs[:, k])
            entry["shapiro_w"] = w
            entry["shapiro_p"] = p
        except ShapeRegError as exc:
            entry["shapiro_w"] = None
            entry["shapiro_p"] = None
            entry["shapiro_note"] = str(exc)
        modes.append(entry)
    report = {
        "n_modes": model.n_modes,
        "n_train": model.n_train,
        "variance_fraction": model.variance_fraction,
        "modes": modes,
    }
    report_path = Path(args.report) if args.report else out.with_name(
        out.stem + "_report.json")
    write_json(report_path, report)
    write_run_manifest(out.parent, "build-model", {
        "data": str(args.data), "count": count,
        "variance_target": args.variance_target,
        "model": out.name, "report": report_path.name,
    })
    print(f"model with {model.n_modes} modes covering "
          f"{100 * model.variance_fraction:.4f}% variance -> {out}")
    return 0


def cmd_regulate(args) -> int:
    model = load_model(args.model)
    predictions = load_predictions(args.predictions)
    labels = [regulate(model, pred, args.z_mm) for pred in predictions]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pseudo_labels(out, labels, args.z_mm)
    write_run_manifest(out.parent, "regulate", {
        "model": str(args.model), "predictions": str(args.predictions),
        "z_mm": args.z_mm, "out": out.name,
    })
    adjusted = sum(1 for lab in labels if lab.branch.value == "adjusted")
    print(f"adjusted {adjusted} / raw-with-exclusions {len(labels) - adjusted} "
          f"(z = {args.z_mm} mm)")
    return 0


def cmd_train(args) -> int:
    if args.threads < 1:
        raise ValueError("--threads must be at least 1")
    cfg = resolve_config(args)
    _, samples = load_dataset(args.data)
    data = _split_dataset(samples, args.labeled, args.unlabeled, args.test)
    if not data.held_out:
        raise ValueError("train needs a non-empty test slice")

    out_dir = Path(args.out)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    snapshots_dir = out_dir / "pseudo_labels"

    write_run_manifest(out_dir, "train", {
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "dataset": {"manifest": str(args.data), "labeled": args.labeled,
                    "unlabeled": args.unlabeled, "test": len(data.held_out)},
        "threads": args.threads,
        "output_dir": str(out_dir),
    })

    if args.resume:
        backbone, params, adam, stage, epoch, seed = load_checkpoint(args.resume)
        if seed != cfg.seed:
            raise ValueError(f"checkpoint seed {seed} does not match "
                             f"configured seed {cfg.seed}")
        state = TrainState(backbone=backbone, params=params, adam=adam,
                           stage=stage, seed=seed, epoch=epoch)
        log_mode = "a"
    else:
        state = init_state(data, cfg)
        log_mode = "w"

    model = None
    if cfg.ablation is not Ablation.SUPERVISED_ONLY:
        model = build_shape_model([ls for _, ls in data.labeled],
                                  cfg.variance_target)
        save_model(model, out_dir / "model.json")

    def snapshot_cb(epoch, labels, mean_err):
        snapshots_dir.mkdir(parents=True, exist_ok=True)
        save_pseudo_labels(snapshots_dir / f"epoch_{epoch:05d}.json",
                           labels, cfg.z_mm)

    def stage_cb(stage_name, st):
        save_checkpoint(ckpt_dir / f"{stage_name}.ckpt", st.backbone,
                        st.params, st.adam, st.stage, st.epoch, st.seed)

    with open(out_dir / "run_log.ndjson", log_mode) as log_fh:
        def sink(record):
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            # resumable mid-stage checkpoints (pretrain / self-train only)
            if (record["stage"] in ("pretrain", "selftrain")
                    and record["epoch"] % cfg.snapshot_every == 0):
                save_checkpoint(ckpt_dir / "latest.ckpt", state.backbone,
                                state.params, state.adam, state.stage,
                                state.epoch, state.seed)

        state, model = run_training(data, cfg, sink=sink,
                                    snapshot_cb=snapshot_cb, state=state,
                                    model=model, stage_cb=stage_cb)

    save_checkpoint(ckpt_dir / "final.ckpt", state.backbone, state.params,
                    state.adam, state.stage, state.epoch, state.seed)
    metrics = evaluate(state, data.held_out)
    write_json(out_dir / "metrics.json", metrics_to_dict(metrics))
    print(metrics_table(metrics))
    return 0


def cmd_eval(args) -> int:
    backbone, params, adam, stage, epoch, seed = load_checkpoint(args.checkpoint)
    state = TrainState(backbone=backbone, params=params, adam=adam,
                       stage=stage, seed=seed, epoch=epoch)
    _, samples = load_dataset(args.data)
    end = args.skip + args.count if args.count is not None else None
    test = samples[args.skip:end]
    if not test:
        raise ValueError("test slice is empty")
    metrics = evaluate(state, test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, metrics_to_dict(metrics))
    write_run_manifest(out.parent, "eval", {
        "checkpoint": str(args.checkpoint), "data": str(args.data),
        "skip": args.skip, "count": len(test), "out": out.name,
    })
    print(metrics_table(metrics))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    _, samples = load_dataset(args.data)
    data = _split_dataset(samples, args.labeled, args.unlabeled, args.test)
    seeds = [int(s) for s in args.seeds.split(",")]

    results = {}
    for arm in ARM_ORDER:
        per_seed = {}
        for seed in seeds:
            run_cfg = replace(cfg, ablation=arm, seed=seed)
            state, _ = run_training(data, run_cfg)
            per_seed[str(seed)] = evaluate(state, data.held_out).mre_mm
        results[arm.value] = {
            "per_seed_mre_mm": per_seed,
            "median_mre_mm": float(np.median(list(per_seed.values()))),
        }

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "ablation.json", {
        "seeds": seeds, "config": config_to_dict(cfg), "arms": results,
    })
    write_run_manifest(out_dir, "ablate", {
        "seed": cfg.seed, "seeds": seeds, "config": config_to_dict(cfg),
        "dataset": {"manifest": str(args.data), "labeled": args.labeled,
                    "unlabeled": args.unlabeled, "test": args.test},
    })
    lines = ["arm                 median MRE (mm)   per-seed MRE (mm)"]
    for arm in ARM_ORDER:
        entry = results[arm.value]
        per_seed = "  ".join(f"{entry['per_seed_mre_mm'][str(s)]:.4f}"
                             for s in seeds)
        lines.append(f"{arm.value:<20}{entry['median_mre_mm']:<18.4f}{per_seed}")
    table = "\n".join(lines)
    (out_dir / "ablation_table.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file mirroring TrainConfig")
    p.add_argument("--epochs", type=int, default=None,
                   help="epochs per stage (default 200)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--z-mm", dest="z_mm", type=float, default=None)
    p.add_argument("--variance-target", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--ablation", choices=[a.value for a in ARM_ORDER],
                   default=None)
    p.add_argument("--finetune-loss", choices=["region-attention", "l1"],
                   default=None)
    p.add_argument("--snapshot-every", type=int, default=None)
    p.add_argument("--max-translate", type=float, default=None)
    p.add_argument("--max-rotate-rad", dest="max_rotate_rad", type=float,
                   default=None)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=None)
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; results are identical for any value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapereg",
        description="Shape-regulated self-training for landmark detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-landmarks", type=int, default=12)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--spacing-mm", type=float, default=100.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-model", help="fit the PCA shape model")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="shape model JSON path")
    p.add_argument("--count", type=int, default=None,
                   help="use the first N samples (default: all)")
    p.add_argument("--variance-target", type=float, default=0.9999)
    p.add_argument("--report", default=None,
                   help="diagnostic report path (default: <out>_report.json)")
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("regulate", help="regulate a predictions file")
    p.add_argument("--model", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z-mm", dest="z_mm", type=float, default=2.0)
    p.set_defaults(func=cmd_regulate)

    p = sub.add_parser("train", help="run the three-stage protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labeled", type=int, required=True)
    p.add_argument("--unlabeled", type=int, required=True)
    p.add_argument("--test", type=int, default=None,
                   help="test samples (default: the rest)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip", type=int, default=0,
                   help="skip the first N samples")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run all arms over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labeled", type=int, required=True)
    p.add_argument("--unlabeled", type=int, required=True)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated seed list")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DegenerateShape, AllSamplesSkipped) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeRegError, ValueError, KeyError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Subcommands:
  phantom   generate a synthetic CT dataset
  train     train one cascade stage's ensemble from a labeled dataset
  predict   run the full cascade on one volume
  evaluate  score predicted label volumes against ground truth

Domain failures print a single ``error: ...`` line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .augment import AugmentConfig
from .cascade import load_cascade, run_cascade
from .evaluate import compute_case_metrics, write_report
from .nn import LevelSpec, ModelConfig, get_preset
from .phantom import PhantomConfig, discover_cases, generate_dataset, load_case
from .train import StageSpec, TrainConfig, build_stage_dataset, train_ensemble
from .volio import Volume, read_metaimage, write_metaimage

__all__ = ["main"]

_STAGE_PRESET = {1: "cdnn-i", 2: "cdnn-ii", 3: "cdnn-ii"}

_CONFIG_KEYS = frozenset({
    "learning_rate", "epochs", "batch_size", "folds", "seed",
    "model_preset", "model_levels",
    "augment", "flip_prob", "max_shift_frac", "max_rotate_deg",
    "scale_low", "scale_high", "contrast_low", "contrast_high",
})


def _parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', "
                                 f"got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"config key {key!r} wants a boolean, got {value!r}")


def _parse_levels(text: str) -> tuple[LevelSpec, ...]:
    """Parse 'WIDTHxKERNELxCONVS,...' such as '8x3x1,16x3x1'."""
    levels = []
    for part in text.split(","):
        fields = part.strip().split("x")
        if len(fields) != 3:
            raise ValueError(f"bad level {part!r}: want WIDTHxKERNELxCONVS")
        try:
            levels.append(LevelSpec(*(int(p) for p in fields)))
        except ValueError:
            raise ValueError(f"bad level {part!r}: parts must be integers") from None
    return tuple(levels)


def _build_train_setup(stage: int, values: dict[str, str],
                       epochs_override: int | None
                       ) -> tuple[ModelConfig, TrainConfig]:
    spec = StageSpec.for_stage(stage)

    if "model_preset" in values and "model_levels" in values:
        raise ValueError("config sets both model_preset and model_levels; pick one")
    if "model_levels" in values:
        model = ModelConfig(name="custom", input_channels=spec.channels,
                            levels=_parse_levels(values["model_levels"]))
    else:
        preset = values.get("model_preset", _STAGE_PRESET[stage])
        model = get_preset(preset, input_channels=spec.channels)

    aug = AugmentConfig()
    if "augment" in values and not _parse_bool(values["augment"], "augment"):
        aug = replace(aug, enabled=False)
    if "flip_prob" in values:
        aug = replace(aug, flip_prob=float(values["flip_prob"]))
    if "max_shift_frac" in values:
        aug = replace(aug, max_shift_frac=float(values["max_shift_frac"]))
    if "max_rotate_deg" in values:
        aug = replace(aug, max_rotate_deg=float(values["max_rotate_deg"]))
    if "scale_low" in values or "scale_high" in values:
        aug = replace(aug, scale_range=(float(values.get("scale_low", aug.scale_range[0])),
                                        float(values.get("scale_high", aug.scale_range[1]))))
    if "contrast_low" in values or "contrast_high" in values:
        aug = replace(aug, contrast_range=(
            float(values.get("contrast_low", aug.contrast_range[0])),
            float(values.get("contrast_high", aug.contrast_range[1]))))

    train = TrainConfig(
        learning_rate=float(values.get("learning_rate", 0.003)),
        epochs=int(values.get("epochs", 200)),
        batch_size=int(values.get("batch_size", 8)),
        folds=int(values.get("folds", 5)),
        seed=int(values.get("seed", 0)),
        augment=aug,
    )
    if epochs_override is not None:
        train = replace(train, epochs=epochs_override)
    return model, train


def _cmd_phantom(args) -> int:
    config = PhantomConfig(count=args.count, seed=args.seed,
                           size=tuple(args.size))
    ids = generate_dataset(config, args.out)
    print(f"wrote {len(ids)} cases to {args.out}")
    return 0


def _cmd_train(args) -> int:
    values = _parse_config_file(args.config) if args.config else {}
    model_config, train_config = _build_train_setup(args.stage, values, args.epochs)
    case_ids = discover_cases(args.data)
    if not case_ids:
        raise ValueError(f"no cases found in {args.data}")
    cases = [(cid, *load_case(args.data, cid)) for cid in case_ids]
    spec = StageSpec.for_stage(args.stage)
    samples = build_stage_dataset(cases, spec)
    if not samples:
        raise ValueError(f"stage {args.stage} found no usable slices in {args.data}")
    paths = train_ensemble(samples, case_ids, model_config, train_config, args.out)
    print(f"stage {args.stage}: trained {len(paths)} members on "
          f"{len(case_ids)} cases ({len(samples)} slices) into {args.out}")
    return 0


def _cmd_predict(args) -> int:
    vol = read_metaimage(args.input)
    if not isinstance(vol, Volume):
        raise ValueError(f"{args.input} is a label image, expected intensities")
    models = load_cascade(args.stage1, args.stage2, args.stage3)
    result = run_cascade(vol, models)
    write_metaimage(result.labels, args.output)

    # recompute counts from the file just written so the summary reflects
    # exactly what a reader of the output will see
    written = read_metaimage(args.output)
    organ = int((written.data >= 1).sum())
    lesion = int((written.data == 2).sum())
    burden = lesion / organ if organ else 0.0

    stem = args.output[:-4] if args.output.endswith(".mhd") else args.output
    summary_path = stem + "_summary.txt"
    lines = [
        f"input: {args.input}",
        f"status: {result.status}",
        f"liver voxels: {organ}",
        f"tumor voxels: {lesion}",
        f"tumor burden: {burden:.6f}",
    ]
    for name, secs in result.stage_seconds.items():
        lines.append(f"{name} seconds: {secs:.3f}")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"{result.status}; labels -> {args.output}, summary -> {summary_path}")
    return 0


def _list_mhd(d) -> set[str]:
    return {n for n in os.listdir(d) if n.endswith(".mhd")}


def _cmd_evaluate(args) -> int:
    pred_names = _list_mhd(args.pred)
    gt_names = _list_mhd(args.gt)
    only_pred = sorted(pred_names - gt_names)
    only_gt = sorted(gt_names - pred_names)
    if only_pred or only_gt:
        parts = []
        if only_pred:
            parts.append("missing ground truth for: " + ", ".join(only_pred))
        if only_gt:
            parts.append("missing predictions for: " + ", ".join(only_gt))
        raise ValueError("; ".join(parts))
    if not pred_names:
        raise ValueError(f"no .mhd files in {args.pred}")

    rows = []
    for name in sorted(pred_names):
        pred = read_metaimage(os.path.join(args.pred, name))
        gt = read_metaimage(os.path.join(args.gt, name))
        case_id = name[:-4]
        rows.append(compute_case_metrics(case_id, pred.data, gt.data,
                                         pred.spacing, gt.spacing))
    csv_path = (args.report[:-4] if args.report.endswith(".txt") else args.report) + ".csv"
    write_report(rows, args.report, csv_path)
    liver = float(np.mean([r.liver.dice for r in rows]))
    tumor = float(np.mean([r.tumor.dice for r in rows]))
    print(f"{len(rows)} cases: liver dice {liver:.4f}, tumor dice {tumor:.4f}; "
          f"report -> {args.report}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liverseg",
        description="Cascaded coarse-to-fine liver and lesion segmentation on CT volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic CT cases")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs=3, default=(128, 128, 64),
                   metavar=("NX", "NY", "NZ"))
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="train one cascade stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", required=True, help="directory of *_volume.mhd / *_labels.mhd")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="run the cascade on one volume")
    p.add_argument("--stage1", required=True, help="stage 1 ensemble directory")
    p.add_argument("--stage2", required=True, help="stage 2 ensemble directory")
    p.add_argument("--stage3", required=True, help="stage 3 ensemble directory")
    p.add_argument("--input", required=True, help="input .mhd volume")
    p.add_argument("--output", required=True, help="output .mhd label volume")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label volumes")
    p.add_argument("--gt", required=True, help="directory of ground truth label volumes")
    p.add_argument("--report", required=True, help="report text file (CSV written beside it)")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface domain errors as one tidy line
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

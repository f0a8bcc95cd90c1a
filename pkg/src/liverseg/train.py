"""Stage-specific dataset construction and model training.

The three stages consume the same case layout but different geometry:

* stage 1 (organ localization): 3 mm slices at 128x128, every slice with any
  organ plus five above and below, organ and lesions merged into one target;
* stage 2 (organ refinement): 2 mm slices, the organ bounding box grown by
  10 voxels and shaped to 256x256, all slices in the box, merged target;
* stage 3 (lesion delineation): native grid inside the grown organ box, only
  slices containing lesion, and a fourth input channel holding the organ-
  masked histogram equalization of the center slice.

Training minimizes the overlap loss with Adam, shuffling samples and redrawing
augmentation parameters every mini-batch.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, augment_sample
from .autograd import Adam
from .morph import extract_axial_patch, fit_axial_box, liver_voi, masked_histogram_equalization, merged_liver_mask
from .nn import CDNNModel, ModelConfig, build_cdnn, jaccard_loss, save_checkpoint
from .volio import LabelVolume, Volume, clamp_hu, normalize_intensity, resample_z, resize_axial, stack_slices

__all__ = [
    "StageSpec",
    "TrainConfig",
    "SliceSample",
    "TrainHistory",
    "TrainingDivergedError",
    "build_stage_dataset",
    "kfold_split",
    "train_model",
    "train_ensemble",
    "ENSEMBLE_MANIFEST",
]

ENSEMBLE_MANIFEST = "ensemble.txt"
SLICE_CONTEXT = 5  # extra slices kept above/below the organ in stage 1


@dataclass(frozen=True)
class StageSpec:
    """Geometry and sampling rules for one cascade stage."""

    stage: int
    axial_size: int | None  # None: keep native in-plane grid
    z_thickness_mm: float | None  # None: keep native slice spacing
    channels: int
    target_rule: str  # "organ-merged" | "lesion-only"
    slice_rule: str  # "organ-context" | "voi-all" | "lesion-only"

    @classmethod
    def for_stage(cls, stage: int) -> "StageSpec":
        if stage == 1:
            return cls(1, 128, 3.0, 3, "organ-merged", "organ-context")
        if stage == 2:
            return cls(2, 256, 2.0, 3, "organ-merged", "voi-all")
        if stage == 3:
            return cls(3, None, None, 4, "lesion-only", "lesion-only")
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    epochs: int = 200
    batch_size: int = 8
    folds: int = 5  # 0 trains only the all-data member (ensemble of one)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.folds < 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, folds >= 0")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class SliceSample:
    """One training slab: input channels, binary target, and provenance."""

    channels: np.ndarray  # (C, H, W) float32 in [0, 1]
    target: np.ndarray  # (H, W) uint8 in {0, 1}
    case_id: str
    slice_index: int
    stage: int


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)


class TrainingDivergedError(RuntimeError):
    pass


def _prep_intensity(vol: Volume) -> Volume:
    return normalize_intensity(clamp_hu(vol))


def build_stage_dataset(cases, spec: StageSpec) -> list[SliceSample]:
    """Build slice samples from (case_id, Volume, LabelVolume) triples.

    Cases without the structure a stage needs (no organ, or no lesion for
    stage 3) are skipped with a warning rather than failing the whole build.
    """
    samples: list[SliceSample] = []
    for case_id, vol, labels in cases:
        if vol.data.shape != labels.data.shape:
            raise ValueError(f"case {case_id}: volume grid {vol.data.shape} != "
                             f"label grid {labels.data.shape}")
        built = _build_case(str(case_id), vol, labels, spec)
        if built is None:
            warnings.warn(f"case {case_id}: no usable slices for stage {spec.stage}, skipped")
            continue
        samples.extend(built)
    return samples


def _build_case(case_id: str, vol: Volume, labels: LabelVolume,
                spec: StageSpec) -> list[SliceSample] | None:
    v = _prep_intensity(vol)
    lab = labels
    if spec.z_thickness_mm is not None:
        v = resample_z(v, spec.z_thickness_mm)
        lab = resample_z(lab, spec.z_thickness_mm)
    organ = merged_liver_mask(lab)
    if not organ.any():
        return None

    if spec.stage == 1:
        v = resize_axial(v, spec.axial_size)
        lab = resize_axial(lab, spec.axial_size)
        organ = merged_liver_mask(lab)
        if not organ.any():
            return None
        zs = np.flatnonzero(organ.any(axis=(1, 2)))
        z0 = max(0, int(zs[0]) - SLICE_CONTEXT)
        z1 = min(v.data.shape[0] - 1, int(zs[-1]) + SLICE_CONTEXT)
        return [
            SliceSample(stack_slices(v, k), organ[k].astype(np.uint8), case_id, k, 1)
            for k in range(z0, z1 + 1)
        ]

    if spec.stage == 2:
        nz, ny, nx = v.data.shape
        box = fit_axial_box(liver_voi(organ), spec.axial_size, nx, ny)
        patch, _ = extract_axial_patch(v.data, box, spec.axial_size)
        tpatch, _ = extract_axial_patch(organ.astype(np.uint8), box, spec.axial_size,
                                        labels=True)
        pv = Volume(patch, v.spacing)
        z_base = box.lo[2]
        return [
            SliceSample(stack_slices(pv, k), tpatch[k].astype(np.uint8),
                        case_id, z_base + k, 2)
            for k in range(patch.shape[0])
        ]

    # stage 3: native grid, lesion slices only, equalized fourth channel
    box = liver_voi(organ)
    sl = box.slices()
    vcrop = Volume(v.data[sl], v.spacing)
    lcrop = lab.data[sl]
    ocrop = organ[sl]
    lesion = lcrop == 2
    zs = np.flatnonzero(lesion.any(axis=(1, 2)))
    if zs.size == 0:
        return None
    eq = masked_histogram_equalization(vcrop.data, ocrop)
    z_base = box.lo[2]
    out = []
    for k in zs:
        ch = np.concatenate([stack_slices(vcrop, int(k)), eq[None, int(k)]], axis=0)
        out.append(SliceSample(ch, lesion[int(k)].astype(np.uint8), case_id,
                               z_base + int(k), 3))
    return out


def kfold_split(case_ids, k: int = 5, seed: int = 0) -> list[list[str]]:
    """Deterministic shuffled split into k folds whose sizes differ by at
    most one.  Order of the input does not matter."""
    ids = sorted(str(c) for c in case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} cases into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    return [[ids[i] for i in sorted(order[f::k])] for f in range(k)]


def _pad_to_multiple(channels: np.ndarray, target: np.ndarray, h: int, w: int):
    """Edge-pad channels (zeros for the target) up to (h, w)."""
    _, ch_h, ch_w = channels.shape
    py, px = h - ch_h, w - ch_w
    if py == 0 and px == 0:
        return channels, target
    channels = np.pad(channels, ((0, 0), (0, py), (0, px)), mode="edge")
    target = np.pad(target, ((0, py), (0, px)), mode="constant")
    return channels, target


def _assemble_batch(batch: list[SliceSample], multiple: int,
                    augment: AugmentConfig | None, rng: np.random.Generator | None):
    """Stack samples into NCHW arrays, augmenting each with freshly drawn
    parameters and padding to a common grid divisible by ``multiple``."""
    chs, tgs = [], []
    for s in batch:
        ch, tg = s.channels, s.target
        if augment is not None and augment.enabled:
            ch, tg = augment_sample(ch, tg, augment, rng)
        chs.append(ch)
        tgs.append(tg)
    h = max(c.shape[1] for c in chs)
    w = max(c.shape[2] for c in chs)
    h = ((h + multiple - 1) // multiple) * multiple
    w = ((w + multiple - 1) // multiple) * multiple
    padded = [_pad_to_multiple(c, t, h, w) for c, t in zip(chs, tgs)]
    x = np.stack([p[0] for p in padded]).astype(np.float32)
    t = np.stack([p[1] for p in padded])[:, None].astype(np.float32)
    return x, t


def _pooled_dice(model: CDNNModel, samples: list[SliceSample], batch_size: int) -> float:
    """Hard-threshold dice pooled over all pixels of the given samples."""
    inter = p_sum = t_sum = 0.0
    mult = model.config.size_multiple
    for i in range(0, len(samples), batch_size):
        x, t = _assemble_batch(samples[i : i + batch_size], mult, None, None)
        pred = model.predict(x) >= 0.5
        tb = t >= 0.5
        inter += float((pred & tb).sum())
        p_sum += float(pred.sum())
        t_sum += float(tb.sum())
    denom = p_sum + t_sum
    return 1.0 if denom == 0 else 2.0 * inter / denom


def train_model(samples: list[SliceSample], model_config: ModelConfig,
                train_config: TrainConfig, val_samples: list[SliceSample] | None = None,
                ) -> tuple[CDNNModel, TrainHistory]:
    """Train one model from scratch.

    Mini-batches are reshuffled every epoch and augmentation parameters are
    redrawn for every batch.  The history records one mean training loss and
    one validation dice per epoch (on ``val_samples`` when given, otherwise
    on a small fixed subset of the training samples).  A non-finite loss
    aborts with the failing epoch and batch in the message.
    """
    if not samples:
        raise ValueError("no training samples")
    channels = {s.channels.shape[0] for s in samples}
    if channels != {model_config.input_channels}:
        raise ValueError(f"samples have channel counts {sorted(channels)}, "
                         f"model expects {model_config.input_channels}")

    rng = np.random.default_rng(train_config.seed)
    model = build_cdnn(model_config, rng)
    opt = Adam(model.parameters(), learning_rate=train_config.learning_rate)
    monitor = val_samples if val_samples else samples[: 2 * train_config.batch_size]
    history = TrainHistory()
    mult = model_config.size_multiple

    for epoch in range(train_config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for bi, start in enumerate(range(0, len(samples), train_config.batch_size)):
            batch = [samples[j] for j in order[start : start + train_config.batch_size]]
            x, t = _assemble_batch(batch, mult, train_config.augment, rng)
            out = model.forward(x, training=True, rng=rng)
            loss = jaccard_loss(out, t)
            value = loss.data.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {bi}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        history.train_loss.append(float(np.mean(losses)))
        history.val_dice.append(_pooled_dice(model, monitor, train_config.batch_size))
    return model, history


def _write_history(history: TrainHistory, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,val_dice\n")
        for e, (l, d) in enumerate(zip(history.train_loss, history.val_dice)):
            f.write(f"{e},{l:.6f},{d:.6f}\n")


def train_ensemble(samples: list[SliceSample], case_ids, model_config: ModelConfig,
                   train_config: TrainConfig, out_dir) -> list[str]:
    """Train the bagged ensemble: one model per cross-validation fold (each
    holding its fold out) plus one trained on all cases.

    Writes member_k.ckpt, member_k_history.csv and a manifest listing every
    member with its training cases.  Returns the checkpoint paths.
    """
    ids = [str(c) for c in case_ids]
    sample_cases = {s.case_id for s in samples}
    unknown = sorted(sample_cases - set(ids))
    if unknown:
        raise ValueError(f"samples reference case ids not in case list: {unknown}")
    if train_config.folds > 0:
        folds = kfold_split(ids, train_config.folds, train_config.seed)
    else:
        folds = []

    os.makedirs(out_dir, exist_ok=True)
    paths: list[str] = []
    manifest_lines: list[str] = []
    members: list[tuple[list[SliceSample], list[SliceSample] | None, list[str]]] = []
    for fold in folds:
        held = set(fold)
        members.append((
            [s for s in samples if s.case_id not in held],
            [s for s in samples if s.case_id in held],
            sorted(set(ids) - held),
        ))
    members.append((samples, None, sorted(ids)))

    for k, (train_samples, val, train_cases) in enumerate(members):
        if not train_samples:
            raise ValueError(f"ensemble member {k} has no training samples")
        cfg = replace(train_config, seed=train_config.seed + k)
        model, history = train_model(train_samples, model_config, cfg, val)
        name = f"member_{k}.ckpt"
        path = os.path.join(out_dir, name)
        save_checkpoint(model, path)
        _write_history(history, os.path.join(out_dir, f"member_{k}_history.csv"))
        paths.append(path)
        manifest_lines.append(f"{name}\t{','.join(train_cases)}")

    with open(os.path.join(out_dir, ENSEMBLE_MANIFEST), "w", encoding="utf-8") as f:
        f.write("\n".join(manifest_lines) + "\n")
    return paths

"""Cascaded three-stage inference: localize the organ at coarse resolution,
refine its boundary inside the volume of interest, then delineate lesions at
native resolution restricted to the refined organ mask.

Each stage averages the probability maps of an ensemble of models, thresholds
at 0.5 on the original voxel grid, and (for the organ stages) keeps only the
largest 26-connected component.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .morph import (
    extract_axial_patch,
    fit_axial_box,
    insert_axial_patch,
    largest_component,
    liver_voi,
    masked_histogram_equalization,
)
from .nn import CDNNModel, load_checkpoint
from .train import StageSpec
from .volio import (
    LabelVolume,
    Volume,
    clamp_hu,
    normalize_intensity,
    resample_to_grid,
    resample_z,
    resize_axial,
    stack_slices,
)

__all__ = [
    "CascadeModels",
    "CascadeOutput",
    "ensemble_predict",
    "threshold_largest_component",
    "localize_liver",
    "segment_liver",
    "segment_tumor",
    "run_cascade",
    "load_ensemble",
    "load_cascade",
]

THRESHOLD = 0.5

STATUS_OK = "ok"
STATUS_LOCALIZATION_FAILED = "localization failed"
STATUS_REFINEMENT_FAILED = "liver segmentation failed"


@dataclass
class CascadeModels:
    stage1: list[CDNNModel]
    stage2: list[CDNNModel]
    stage3: list[CDNNModel]

    def __post_init__(self):
        for stage, models, want in ((1, self.stage1, 3), (2, self.stage2, 3),
                                    (3, self.stage3, 4)):
            if not models:
                raise ValueError(f"stage {stage} ensemble is empty")
            for m in models:
                if m.config.input_channels != want:
                    raise ValueError(
                        f"stage {stage} model expects {m.config.input_channels} input "
                        f"channels, the cascade feeds {want}"
                    )


@dataclass
class CascadeOutput:
    labels: LabelVolume  # 0 background, 1 organ, 2 lesion
    tumor_burden: float
    status: str
    liver_prob: Volume | None = None
    tumor_prob: Volume | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)


def ensemble_predict(models: list[CDNNModel], x: np.ndarray) -> np.ndarray:
    """Mean probability over ensemble members for an NCHW batch."""
    if not models:
        raise ValueError("empty ensemble")
    channels = {m.config.input_channels for m in models}
    if len(channels) != 1 or x.shape[1] not in channels:
        raise ValueError(f"ensemble expects channels {sorted(channels)}, got {x.shape[1]}")
    acc = None
    for m in models:
        p = m.predict(x)
        acc = p if acc is None else acc + p
    return acc / len(models)


def _predict_slab_volume(models: list[CDNNModel], slabs: np.ndarray,
                         batch_size: int = 8) -> np.ndarray:
    """Run (nz, C, H, W) slabs through the ensemble; returns (nz, H, W)."""
    probs = []
    for i in range(0, slabs.shape[0], batch_size):
        probs.append(ensemble_predict(models, slabs[i : i + batch_size])[:, 0])
    return np.concatenate(probs, axis=0)


def _pad_for_model(slabs: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad H/W up to the model's size multiple; returns the pad so the
    prediction can be cropped back."""
    _, _, h, w = slabs.shape
    py = (multiple - h % multiple) % multiple
    px = (multiple - w % multiple) % multiple
    if py or px:
        slabs = np.pad(slabs, ((0, 0), (0, 0), (0, py), (0, px)), mode="edge")
    return slabs, (py, px)


def _stack_all_slices(vol: Volume) -> np.ndarray:
    return np.stack([stack_slices(vol, k) for k in range(vol.data.shape[0])])


def threshold_largest_component(prob: np.ndarray, threshold: float = THRESHOLD
                                ) -> tuple[np.ndarray, bool]:
    """Binarize a probability volume and keep its largest 26-connected
    component.  Returns (mask, found); found is False when nothing reaches
    the threshold, in which case the mask is all background."""
    fg = prob >= threshold
    if not fg.any():
        return np.zeros_like(fg), False
    return largest_component(fg, connectivity=26), True


def localize_liver(vol: Volume, models: list[CDNNModel]
                   ) -> tuple[np.ndarray, bool, np.ndarray]:
    """Coarse organ localization on the clamped HU volume.

    Predicts on the 3 mm / 128x128 grid, carries probabilities back to the
    original grid by trilinear resampling, thresholds at 0.5 and keeps the
    largest component.  Returns (mask, found, probability volume); a miss
    (no voxel over threshold) comes back as an all-background mask.
    """
    spec = StageSpec.for_stage(1)
    v = normalize_intensity(vol)
    coarse = resample_z(v, spec.z_thickness_mm)
    coarse = resize_axial(coarse, spec.axial_size)
    slabs = _stack_all_slices(coarse)
    probs = _predict_slab_volume(models, slabs)
    full = resample_to_grid(probs, coarse.spacing,
                            vol.data.shape, vol.spacing)
    mask, found = threshold_largest_component(full)
    return mask, found, full


def segment_liver(vol: Volume, coarse_mask: np.ndarray, models: list[CDNNModel]
                  ) -> tuple[np.ndarray, bool, np.ndarray]:
    """Refine the organ boundary inside the coarse mask's VOI.

    Works on the 2 mm grid; the VOI (grown by 10 voxels) is shaped to
    256x256 per slice, predicted, mapped back to the original grid,
    thresholded and reduced to the largest component.
    """
    if not coarse_mask.any():
        raise ValueError("coarse organ mask is empty; run localization first")
    spec = StageSpec.for_stage(2)
    v = resample_z(normalize_intensity(vol), spec.z_thickness_mm)
    m = resample_z(LabelVolume(coarse_mask.astype(np.uint8), vol.spacing),
                   spec.z_thickness_mm)
    mask2 = m.data > 0
    if not mask2.any():
        # nearest z-resampling can drop a sliver-thin mask; fall back to the
        # full z range so the refinement stage still sees the organ
        mask2 = np.ones_like(mask2)
    nz, ny, nx = v.data.shape
    box = fit_axial_box(liver_voi(mask2), spec.axial_size, nx, ny)
    patch, meta = extract_axial_patch(v.data, box, spec.axial_size)
    slabs = _stack_all_slices(Volume(patch, v.spacing))
    slabs, (py, px) = _pad_for_model(slabs, models[0].config.size_multiple)
    probs = _predict_slab_volume(models, slabs)
    if py or px:
        probs = probs[:, : probs.shape[1] - py if py else None,
                      : probs.shape[2] - px if px else None]
    grid_probs = insert_axial_patch(probs, meta, v.data.shape)
    full = resample_to_grid(grid_probs, v.spacing, vol.data.shape, vol.spacing)
    mask, found = threshold_largest_component(full)
    return mask, found, full


def segment_tumor(vol: Volume, liver_mask: np.ndarray, models: list[CDNNModel]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Delineate lesions at native resolution inside the organ VOI.

    The fourth input channel is the organ-masked histogram equalization of
    the VOI.  Lesion voxels are kept only where the organ mask is set; no
    largest-component step, lesions may be multiple.
    """
    if not liver_mask.any():
        raise ValueError("organ mask is empty; cannot delineate lesions")
    v = normalize_intensity(vol)
    box = liver_voi(liver_mask)
    sl = box.slices()
    vcrop = Volume(v.data[sl], v.spacing)
    mcrop = liver_mask[sl]
    eq = masked_histogram_equalization(vcrop.data, mcrop)
    slabs = np.stack([
        np.concatenate([stack_slices(vcrop, k), eq[None, k]], axis=0)
        for k in range(vcrop.data.shape[0])
    ])
    slabs, (py, px) = _pad_for_model(slabs, models[0].config.size_multiple)
    probs = _predict_slab_volume(models, slabs)
    if py or px:
        probs = probs[:, : probs.shape[1] - py if py else None,
                      : probs.shape[2] - px if px else None]
    full = np.zeros(vol.data.shape, dtype=np.float32)
    full[sl] = probs
    mask = (full >= THRESHOLD) & liver_mask
    return mask, full


def run_cascade(vol: Volume, models: CascadeModels,
                keep_probabilities: bool = False) -> CascadeOutput:
    """Full pipeline on a raw HU volume.

    A failed localization (or an organ refinement that finds nothing) yields
    an all-background labeling with the failure recorded in ``status``; the
    lesion stage then never runs.  Lesion voxels are a subset of organ voxels
    by construction, so labels are always in {0, 1, 2}.
    """
    clamped = clamp_hu(vol)
    timings: dict[str, float] = {}
    empty = LabelVolume(np.zeros(vol.data.shape, dtype=np.uint8), vol.spacing)

    t0 = time.perf_counter()
    coarse, found, coarse_prob = localize_liver(clamped, models.stage1)
    timings["stage1"] = time.perf_counter() - t0
    if not found:
        return CascadeOutput(empty, 0.0, STATUS_LOCALIZATION_FAILED,
                             stage_seconds=timings)

    t0 = time.perf_counter()
    liver, found, liver_prob = segment_liver(clamped, coarse, models.stage2)
    timings["stage2"] = time.perf_counter() - t0
    if not found:
        return CascadeOutput(empty, 0.0, STATUS_REFINEMENT_FAILED,
                             stage_seconds=timings)

    t0 = time.perf_counter()
    tumor, tumor_prob = segment_tumor(clamped, liver, models.stage3)
    timings["stage3"] = time.perf_counter() - t0

    labels = np.zeros(vol.data.shape, dtype=np.uint8)
    labels[liver] = 1
    labels[tumor] = 2
    burden = float(tumor.sum()) / float(liver.sum())  # liver is non-empty here
    return CascadeOutput(
        labels=LabelVolume(labels, vol.spacing),
        tumor_burden=burden,
        status=STATUS_OK,
        liver_prob=Volume(liver_prob, vol.spacing) if keep_probabilities else None,
        tumor_prob=Volume(tumor_prob, vol.spacing) if keep_probabilities else None,
        stage_seconds=timings,
    )


def load_ensemble(model_dir) -> list[CDNNModel]:
    """Load every member listed in a training output directory's manifest."""
    from .train import ENSEMBLE_MANIFEST

    manifest = os.path.join(os.fspath(model_dir), ENSEMBLE_MANIFEST)
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no ensemble manifest at {manifest}")
    models = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name = line.split("\t")[0]
            models.append(load_checkpoint(os.path.join(os.fspath(model_dir), name)))
    if not models:
        raise ValueError(f"manifest {manifest} lists no members")
    return models


def load_cascade(stage1_dir, stage2_dir, stage3_dir) -> CascadeModels:
    return CascadeModels(
        stage1=load_ensemble(stage1_dir),
        stage2=load_ensemble(stage2_dir),
        stage3=load_ensemble(stage3_dir),
    )

"""Mini-batch data augmentation: one transform is sampled per training slab
and applied identically to every input channel and to the target mask.

Geometric moves are horizontal flip, sub-image translation, small rotation
and isotropic scaling about the image center; photometric jitter rescales
each channel's contrast about its own mean.  Parameters are redrawn for
every mini-batch, never cached across batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "AugmentConfig",
    "TransformParams",
    "sample_params",
    "geometric_transform",
    "contrast_jitter",
    "augment_sample",
]


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    max_shift_frac: float = 0.1
    max_rotate_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.max_shift_frac < 0 or self.max_rotate_deg < 0:
            raise ValueError("shift/rotation bounds must be non-negative")
        for name, (lo, hi) in (("scale_range", self.scale_range),
                               ("contrast_range", self.contrast_range)):
            if lo > hi or lo <= 0:
                raise ValueError(f"bad {name}: {(lo, hi)}")


IDENTITY_CONFIG = AugmentConfig(enabled=True, flip_prob=0.0, max_shift_frac=0.0,
                                max_rotate_deg=0.0, scale_range=(1.0, 1.0),
                                contrast_range=(1.0, 1.0))


@dataclass(frozen=True)
class TransformParams:
    flip: bool
    shift_yx: tuple[float, float]  # pixels
    rotate_deg: float
    scale: float
    contrast: tuple[float, ...]  # one factor per channel

    def is_geometric_identity(self) -> bool:
        return (not self.flip and self.shift_yx == (0.0, 0.0)
                and self.rotate_deg == 0.0 and self.scale == 1.0)


def identity_params(n_channels: int) -> TransformParams:
    return TransformParams(False, (0.0, 0.0), 0.0, 1.0, (1.0,) * n_channels)


def sample_params(config: AugmentConfig, rng: np.random.Generator,
                  n_channels: int, image_hw: tuple[int, int]) -> TransformParams:
    """Draw one transform.  Disabled configs (or ranges collapsed onto the
    identity) yield exact identity parameters."""
    if not config.enabled:
        return identity_params(n_channels)
    h, w = image_hw
    flip = bool(rng.random() < config.flip_prob) if config.flip_prob > 0 else False
    if config.max_shift_frac > 0:
        shift = (float(rng.uniform(-1, 1) * config.max_shift_frac * h),
                 float(rng.uniform(-1, 1) * config.max_shift_frac * w))
    else:
        shift = (0.0, 0.0)
    angle = float(rng.uniform(-config.max_rotate_deg, config.max_rotate_deg)) \
        if config.max_rotate_deg > 0 else 0.0
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    clo, chi = config.contrast_range
    contrast = tuple(float(rng.uniform(clo, chi)) if chi > clo else float(clo)
                     for _ in range(n_channels))
    return TransformParams(flip, shift, angle, scale, contrast)


def _inverse_affine(params: TransformParams, hw: tuple[int, int]):
    """Matrix/offset mapping output (y, x) coords to input coords for
    scipy's affine_transform: rotate by angle and scale about the center,
    then translate."""
    theta = np.deg2rad(params.rotate_deg)
    c, s = np.cos(theta), np.sin(theta)
    # forward: out = scale * R @ (in - center) + center + shift
    inv = np.array([[c, s], [-s, c]]) / params.scale  # R(-theta)/scale in (y, x)
    center = (np.asarray(hw, dtype=float) - 1.0) / 2.0
    offset = center - inv @ (center + np.asarray(params.shift_yx))
    return inv, offset


def geometric_transform(channels: np.ndarray, target: np.ndarray,
                        params: TransformParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply one flip + affine to a (C, H, W) slab and its (H, W) target.

    Channels interpolate bilinearly with edge extension; the target uses
    nearest-neighbour with zero fill, so it stays strictly binary.  Identity
    parameters return exact copies; a pure flip is exact as well.
    """
    if channels.ndim != 3 or target.shape != channels.shape[1:]:
        raise ValueError(
            f"expected (C, H, W) channels with matching target, got "
            f"{channels.shape} / {target.shape}"
        )
    ch = channels[:, :, ::-1] if params.flip else channels
    tg = target[:, ::-1] if params.flip else target
    if _rest_is_identity(params):  # flip alone stays exact, no interpolation
        return np.ascontiguousarray(ch.astype(np.float32)), np.ascontiguousarray(tg)

    inv, offset = _inverse_affine(params, target.shape)
    out_ch = np.empty_like(ch, dtype=np.float32)
    for c in range(ch.shape[0]):
        out_ch[c] = ndimage.affine_transform(
            ch[c].astype(np.float32), inv, offset=offset, order=1, mode="nearest"
        )
    out_tg = ndimage.affine_transform(
        tg.astype(np.uint8), inv, offset=offset, order=0, mode="constant", cval=0
    )
    return out_ch, out_tg


def _rest_is_identity(params: TransformParams) -> bool:
    return (params.shift_yx == (0.0, 0.0) and params.rotate_deg == 0.0
            and params.scale == 1.0)


def contrast_jitter(channels: np.ndarray, params: TransformParams) -> np.ndarray:
    """Rescale each channel about its mean by its factor, clamped to [0, 1]:
    out = clip(mean + (v - mean) * f)."""
    if channels.shape[0] != len(params.contrast):
        raise ValueError(
            f"{channels.shape[0]} channels but {len(params.contrast)} contrast factors"
        )
    out = np.empty_like(channels, dtype=np.float32)
    for c, f in enumerate(params.contrast):
        m = channels[c].mean()
        out[c] = np.clip(m + (channels[c] - m) * f, 0.0, 1.0)
    return out


def augment_sample(channels: np.ndarray, target: np.ndarray,
                   config: AugmentConfig, rng: np.random.Generator):
    """Sample fresh parameters and apply the full augmentation to one slab."""
    params = sample_params(config, rng, channels.shape[0], target.shape)
    ch, tg = geometric_transform(channels, target, params)
    if any(f != 1.0 for f in params.contrast):
        ch = contrast_jitter(ch, params)
    return ch, tg

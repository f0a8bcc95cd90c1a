"""Mask-domain geometry: connected components, volume-of-interest boxes,
axial patch extraction, and in-mask histogram equalization.

Boxes carry inclusive (x, y, z) corners to match the voxel ordering used in
file I/O, while arrays stay in (z, y, x) index order; the helpers here do
that translation so callers never index by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volio import LabelVolume, Volume, _axis_linear, _axis_nearest

__all__ = [
    "Box3",
    "PatchMeta",
    "connected_components_3d",
    "largest_component",
    "liver_voi",
    "fit_axial_box",
    "extract_axial_patch",
    "insert_axial_patch",
    "masked_histogram_equalization",
    "merged_liver_mask",
]

VOI_MARGIN = 10  # voxels added on every side of a structure bounding box


@dataclass(frozen=True)
class Box3:
    """Inclusive 3-D box; lo and hi are (x, y, z) voxel indices."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box: lo={self.lo} hi={self.hi}")
        if any(l < 0 for l in self.lo):
            raise ValueError(f"box extends below zero: lo={self.lo}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        """(z, y, x) slice tuple for indexing volume arrays."""
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        return (slice(z0, z1 + 1), slice(y0, y1 + 1), slice(x0, x1 + 1))


def _as_binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {arr.shape}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.all((vals == 0) | (vals == 1)):
            raise ValueError("mask must be binary")
        arr = arr.astype(bool)
    return arr


def connected_components_3d(mask, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Label foreground components under 6- or 26-connectivity.

    Ids are dense from 1 and ordered by each component's first voxel in scan
    order (z, then y, then x fastest).  Returns (labels, sizes) with
    sizes[i-1] the voxel count of component i.
    """
    arr = _as_binary(mask)
    if connectivity == 26:
        structure = np.ones((3, 3, 3), dtype=bool)
    elif connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")

    raw, n = ndimage.label(arr, structure=structure)
    if n == 0:
        return raw.astype(np.int32), np.zeros(0, dtype=np.int64)

    # renumber by first appearance so the id order never depends on library
    # internals
    flat = raw.ravel()
    ids, first = np.unique(flat[flat > 0], return_index=True)
    order = ids[np.argsort(first)]
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[order] = np.arange(1, n + 1)
    labels = lut[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return labels, sizes


def largest_component(mask, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest component; ties go to the component whose first
    voxel comes earliest in scan order (the lowest id).  Empty in, empty out."""
    arr = _as_binary(mask)
    labels, sizes = connected_components_3d(arr, connectivity)
    if sizes.size == 0:
        return np.zeros_like(arr)
    return labels == (int(np.argmax(sizes)) + 1)


def liver_voi(mask, margin: int = VOI_MARGIN) -> Box3:
    """Bounding box of a non-empty mask grown by ``margin`` voxels per
    direction and clipped to the volume."""
    arr = _as_binary(mask)
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    coords = np.argwhere(arr)  # (z, y, x) rows
    if coords.shape[0] == 0:
        raise ValueError("cannot take the VOI of an empty mask")
    zlo, ylo, xlo = coords.min(axis=0)
    zhi, yhi, xhi = coords.max(axis=0)
    nz, ny, nx = arr.shape
    return Box3(
        lo=(max(0, int(xlo) - margin), max(0, int(ylo) - margin), max(0, int(zlo) - margin)),
        hi=(
            min(nx - 1, int(xhi) + margin),
            min(ny - 1, int(yhi) + margin),
            min(nz - 1, int(zhi) + margin),
        ),
    )


def fit_axial_box(box: Box3, target: int, nx: int, ny: int) -> Box3:
    """Grow the box's x/y spans toward ``target`` pixels, symmetrically,
    sliding and clipping at the volume border.  Spans already over target are
    left alone (extraction will down-sample them); z is untouched."""

    def fit(lo: int, hi: int, n: int) -> tuple[int, int]:
        extent = hi - lo + 1
        if extent >= target:
            return lo, hi
        need = target - extent
        lo2 = lo - need // 2
        hi2 = hi + (need - need // 2)
        if lo2 < 0:
            hi2 += -lo2
            lo2 = 0
        if hi2 > n - 1:
            lo2 -= hi2 - (n - 1)
            hi2 = n - 1
        return max(0, lo2), hi2

    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    x0, x1 = fit(x0, x1, nx)
    y0, y1 = fit(y0, y1, ny)
    return Box3((x0, y0, z0), (x1, y1, z1))


@dataclass(frozen=True)
class PatchMeta:
    """How an axial patch was produced, sufficient to invert the mapping."""

    box: Box3
    cropped_yx: tuple[int, int]  # extents inside the volume before resize/pad
    resized_yx: tuple[int, int]  # extents after any down-sampling
    pad_y: tuple[int, int]
    pad_x: tuple[int, int]


def extract_axial_patch(data: np.ndarray, box: Box3, target: int,
                        labels: bool = False) -> tuple[np.ndarray, PatchMeta]:
    """Cut the box out of (z, y, x) data and shape each slice to
    target x target: axes longer than target are down-sampled (bilinear, or
    nearest for labels), shorter ones are padded (edge values for images,
    zeros for labels)."""
    crop = data[box.slices()]
    _, cy, cx = crop.shape
    ry, rx = min(cy, target), min(cx, target)
    if (ry, rx) != (cy, cx):
        if labels:
            crop = _axis_nearest(_axis_nearest(crop, 1, ry), 2, rx)
        else:
            crop = _axis_linear(_axis_linear(crop, 1, ry), 2, rx)
    pad_y = ((target - ry) // 2, target - ry - (target - ry) // 2)
    pad_x = ((target - rx) // 2, target - rx - (target - rx) // 2)
    if pad_y != (0, 0) or pad_x != (0, 0):
        mode = "constant" if labels else "edge"
        crop = np.pad(crop, ((0, 0), pad_y, pad_x), mode=mode)
    meta = PatchMeta(box=box, cropped_yx=(cy, cx), resized_yx=(ry, rx),
                     pad_y=pad_y, pad_x=pad_x)
    return np.ascontiguousarray(crop), meta


def insert_axial_patch(patch: np.ndarray, meta: PatchMeta, out_shape) -> np.ndarray:
    """Invert extract_axial_patch for a probability patch: strip padding,
    up-sample back to the cropped extent, and place at the box position in a
    zero volume of ``out_shape``."""
    ry, rx = meta.resized_yx
    cy, cx = meta.cropped_yx
    core = patch[:, meta.pad_y[0] : meta.pad_y[0] + ry, meta.pad_x[0] : meta.pad_x[0] + rx]
    if (ry, rx) != (cy, cx):
        core = _axis_linear(_axis_linear(core, 1, cy), 2, cx)
    out = np.zeros(out_shape, dtype=np.float32)
    out[meta.box.slices()] = core
    return out


def masked_histogram_equalization(vol, mask, bins: int = 256):
    """Histogram-equalize [0, 1] intensities using only in-mask voxels to
    build the transfer function, then apply it to every voxel.

    The transfer is the in-mask CDF sampled over ``bins`` uniform bins, so it
    is monotone non-decreasing and maps into [0, 1].
    """
    is_volume = isinstance(vol, Volume)
    data = vol.data if is_volume else np.asarray(vol, dtype=np.float32)
    m = _as_binary(mask)
    if m.shape != data.shape:
        raise ValueError(f"mask shape {m.shape} != volume shape {data.shape}")
    if not m.any():
        raise ValueError("mask is empty; no voxels to build the transfer from")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")

    idx = np.clip((data * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx[m], minlength=bins)
    cdf = np.cumsum(hist, dtype=np.float64)
    cdf /= cdf[-1]
    out = cdf[idx].astype(np.float32)
    if is_volume:
        return Volume(out, vol.spacing)
    return out


def merged_liver_mask(labels: LabelVolume | np.ndarray) -> np.ndarray:
    """Foreground-organ mask: lesion voxels count as organ (label >= 1)."""
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    return data >= 1

"""Synthetic abdominal CT phantoms for desk-scale training and testing.

Each case is an ellipsoidal organ with a handful of spherical low-intensity
lesions strictly inside it, on a smoothly varying soft-tissue background,
plus Gaussian noise, rounded to integer HU.  Every fifth case is lesion-free
so burden-zero paths get exercised.  All randomness derives from
``default_rng((seed, case_index))``, so regeneration is bit-reproducible.

Files follow the ``case_###_volume.mhd`` / ``case_###_labels.mhd`` naming
that the training and evaluation commands expect.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .volio import LabelVolume, Volume, read_metaimage, write_metaimage

__all__ = [
    "PhantomConfig",
    "generate_phantom",
    "generate_dataset",
    "discover_cases",
    "load_case",
]


@dataclass(frozen=True)
class PhantomConfig:
    count: int = 10
    size: tuple[int, int, int] = (128, 128, 64)  # (nx, ny, nz) voxels
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)  # mm
    liver_hu: tuple[float, float] = (80.0, 160.0)
    tumor_hu: tuple[float, float] = (30.0, 80.0)
    background_hu: tuple[float, float] = (-80.0, 60.0)
    tumor_radius_mm: tuple[float, float] = (3.0, 8.0)
    max_tumors: int = 4
    noise_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if any(s < 8 for s in self.size):
            raise ValueError("phantom volumes need at least 8 voxels per axis")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.max_tumors < 0:
            raise ValueError("max_tumors must be >= 0")


def _voxel_centers(n: int, step: float) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) * step


def generate_phantom(config: PhantomConfig, index: int
                     ) -> tuple[Volume, LabelVolume]:
    """One phantom case.  Returns the HU volume (already rounded to whole HU)
    and its label volume (0 background, 1 organ, 2 lesion)."""
    rng = np.random.default_rng((config.seed, index))
    nx, ny, nz = config.size
    sx, sy, sz = config.spacing
    extents = np.array([nz * sz, ny * sy, nx * sx])  # physical (z, y, x) mm
    zc = _voxel_centers(nz, sz)[:, None, None]
    yc = _voxel_centers(ny, sy)[None, :, None]
    xc = _voxel_centers(nx, sx)[None, None, :]

    # soft-tissue background: a base level plus a few broad analytic bumps
    base = rng.uniform(-60.0, 20.0)
    hu = np.full((nz, ny, nx), base, dtype=np.float64)
    for _ in range(rng.integers(1, 4)):
        amp = rng.uniform(-40.0, 40.0)
        ctr = rng.uniform(0.2, 0.8, size=3) * extents
        sig = rng.uniform(0.15, 0.30, size=3) * extents
        hu += amp * np.exp(-0.5 * (((zc - ctr[0]) / sig[0]) ** 2
                                   + ((yc - ctr[1]) / sig[1]) ** 2
                                   + ((xc - ctr[2]) / sig[2]) ** 2))
    np.clip(hu, config.background_hu[0], config.background_hu[1], out=hu)

    # organ: axis-aligned ellipsoid with jittered center
    semi = rng.uniform(0.28, 0.40, size=3) * extents
    semi = np.minimum(semi, 0.45 * extents)
    center = 0.5 * extents + rng.uniform(-0.04, 0.04, size=3) * extents
    eco = (((zc - center[0]) / semi[0]) ** 2
           + ((yc - center[1]) / semi[1]) ** 2
           + ((xc - center[2]) / semi[2]) ** 2)
    organ = eco <= 1.0
    liver_val = rng.uniform(*config.liver_hu)
    hu[organ] = liver_val

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    labels[organ] = 1

    # lesions: spheres kept strictly inside the ellipsoid by bounding the
    # normalized center distance plus the sphere's normalized radius
    min_semi = float(semi.min())
    if index % 5 == 4 or config.max_tumors == 0:
        n_tumors = 0
    else:
        n_tumors = int(rng.integers(1, config.max_tumors + 1))
    r_lo = config.tumor_radius_mm[0]
    r_hi = min(config.tumor_radius_mm[1], 0.45 * min_semi)
    if r_hi < r_lo:
        n_tumors = 0
    tumor_hi = max(config.tumor_hu[0] + 1.0,
                   min(config.tumor_hu[1], liver_val - 30.0))
    for _ in range(n_tumors):
        r = rng.uniform(r_lo, r_hi)
        for _attempt in range(100):
            u = rng.uniform(-0.7, 0.7, size=3)
            if float(np.linalg.norm(u)) + r / min_semi <= 0.92:
                break
        else:
            continue
        tcen = center + u * semi
        sphere = ((zc - tcen[0]) ** 2 + (yc - tcen[1]) ** 2
                  + (xc - tcen[2]) ** 2) <= r * r
        if not sphere.any():
            continue
        hu[sphere] = rng.uniform(config.tumor_hu[0], tumor_hi)
        labels[sphere] = 2

    hu += rng.normal(0.0, config.noise_sigma, size=hu.shape)
    hu = np.rint(hu)
    vol = Volume(hu.astype(np.float32), config.spacing)
    return vol, LabelVolume(labels, config.spacing)


def generate_dataset(config: PhantomConfig, out_dir) -> list[str]:
    """Write ``count`` cases into out_dir; returns the case ids."""
    out = os.fspath(out_dir)
    os.makedirs(out, exist_ok=True)
    ids = []
    for index in range(config.count):
        case_id = f"case_{index:03d}"
        vol, labels = generate_phantom(config, index)
        write_metaimage(vol, os.path.join(out, f"{case_id}_volume.mhd"),
                        element_type="MET_SHORT")
        write_metaimage(labels, os.path.join(out, f"{case_id}_labels.mhd"))
        ids.append(case_id)
    return ids


_CASE_RE = re.compile(r"^(?P<case>.+)_volume\.mhd$")


def discover_cases(data_dir) -> list[str]:
    """Case ids present in a directory, sorted.  A case needs both its
    volume and its labels file; a volume without labels is an error."""
    d = os.fspath(data_dir)
    ids = []
    missing = []
    for name in sorted(os.listdir(d)):
        m = _CASE_RE.match(name)
        if not m:
            continue
        case_id = m.group("case")
        if os.path.exists(os.path.join(d, f"{case_id}_labels.mhd")):
            ids.append(case_id)
        else:
            missing.append(case_id)
    if missing:
        raise FileNotFoundError(
            "missing labels for cases: " + ", ".join(missing))
    return ids


def load_case(data_dir, case_id: str) -> tuple[Volume, LabelVolume]:
    d = os.fspath(data_dir)
    vol = read_metaimage(os.path.join(d, f"{case_id}_volume.mhd"))
    lab = read_metaimage(os.path.join(d, f"{case_id}_labels.mhd"))
    if not isinstance(vol, Volume):
        raise ValueError(f"{case_id}: volume file holds labels, not intensities")
    if not isinstance(lab, LabelVolume):
        raise ValueError(f"{case_id}: labels file is not an unsigned byte image")
    return vol, lab

"""Volumetric image containers, MetaImage (.mhd/.raw) reading and writing,
and the intensity / grid preprocessing shared by all pipeline stages.

Arrays are kept in (z, y, x) index order with C layout, which matches the
x-fastest voxel ordering of the raw files, so ``data[k]`` is axial slice k.
Physical coordinates put the center of voxel i at ``(i + 0.5) * spacing``
along each axis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Volume",
    "LabelVolume",
    "read_metaimage",
    "write_metaimage",
    "clamp_hu",
    "normalize_intensity",
    "resample_z",
    "resize_axial",
    "stack_slices",
    "resample_to_grid",
]

HU_WINDOW = (-100.0, 400.0)


def _check_volume_args(data: np.ndarray, spacing) -> tuple[float, float, float]:
    if data.ndim != 3:
        raise ValueError(f"volume data must be 3-D (z, y, x), got shape {data.shape}")
    sx, sy, sz = (float(s) for s in spacing)
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    return sx, sy, sz


@dataclass
class Volume:
    """Scalar image volume; data is float32 (z, y, x)."""

    data: np.ndarray
    spacing: tuple[float, float, float]  # (sx, sy, sz) in mm

    def __post_init__(self):
        self.spacing = _check_volume_args(self.data, self.spacing)
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        self.data = np.ascontiguousarray(self.data)

    @property
    def size(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


@dataclass
class LabelVolume:
    """Discrete label volume; data is uint8 (z, y, x) on the same grid
    conventions as Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.spacing = _check_volume_args(self.data, self.spacing)
        if self.data.dtype != np.uint8:
            self.data = self.data.astype(np.uint8)
        self.data = np.ascontiguousarray(self.data)

    @property
    def size(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}


def read_metaimage(path) -> Volume | LabelVolume:
    """Read a two-file MetaImage volume (.mhd header + raw data).

    MET_UCHAR data comes back as a LabelVolume, MET_SHORT / MET_FLOAT as a
    float32 Volume.  Malformed headers and size mismatches raise ValueError
    naming the offending header line.
    """
    header: dict[str, str] = {}
    lines: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw_line in f:
            line = raw_line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed header line: {line!r}")
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            lines[key.strip()] = line
            if key.strip() == "ElementDataFile":
                break

    for required in ("NDims", "DimSize", "ElementType", "ElementSpacing", "ElementDataFile"):
        if required not in header:
            raise ValueError(f"header is missing required key {required!r}")
    if header.get("ObjectType", "Image") != "Image":
        raise ValueError(f"unsupported object type: {lines['ObjectType']!r}")
    if header["NDims"] != "3":
        raise ValueError(f"only 3-D volumes are supported: {lines['NDims']!r}")
    msb = header.get("ElementByteOrderMSB", "False")
    if msb.lower() not in ("false", "0"):
        raise ValueError(f"big-endian data is not supported: {lines['ElementByteOrderMSB']!r}")
    if header["ElementType"] not in _ELEMENT_TYPES:
        raise ValueError(f"unsupported element type: {lines['ElementType']!r}")

    try:
        nx, ny, nz = (int(v) for v in header["DimSize"].split())
        sx, sy, sz = (float(v) for v in header["ElementSpacing"].split())
    except (ValueError, TypeError):
        raise ValueError(
            f"could not parse {lines['DimSize']!r} / {lines['ElementSpacing']!r}"
        ) from None

    dtype = _ELEMENT_TYPES[header["ElementType"]]
    data_path = os.path.join(os.path.dirname(os.fspath(path)), header["ElementDataFile"])
    raw = np.fromfile(data_path, dtype=dtype)
    if raw.size != nx * ny * nz:
        raise ValueError(
            f"data file holds {raw.size} elements but {lines['DimSize']!r} implies {nx * ny * nz}"
        )
    data = raw.reshape(nz, ny, nx)  # x-fastest on disk
    if header["ElementType"] == "MET_UCHAR":
        return LabelVolume(data, (sx, sy, sz))
    return Volume(data.astype(np.float32), (sx, sy, sz))


def write_metaimage(vol: Volume | LabelVolume, path, element_type: str | None = None) -> None:
    """Write volume as .mhd header + .raw data next to it.

    Volume data defaults to MET_FLOAT (MET_SHORT available for integral CT
    data); LabelVolume always writes MET_UCHAR.  Supported element types
    round-trip losslessly.
    """
    path = os.fspath(path)
    if not path.endswith(".mhd"):
        raise ValueError(f"output path must end in .mhd, got {path!r}")
    if isinstance(vol, LabelVolume):
        element_type = element_type or "MET_UCHAR"
        if element_type != "MET_UCHAR":
            raise ValueError("label volumes must be written as MET_UCHAR")
    else:
        element_type = element_type or "MET_FLOAT"
    if element_type not in _ELEMENT_TYPES:
        raise ValueError(f"unsupported element type: {element_type!r}")

    nx, ny, nz = vol.size
    sx, sy, sz = vol.spacing
    raw_name = os.path.basename(path)[:-4] + ".raw"
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "ElementByteOrderMSB = False\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {sx} {sy} {sz}\n"
        f"ElementType = {element_type}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(header)
    vol.data.astype(_ELEMENT_TYPES[element_type]).tofile(
        os.path.join(os.path.dirname(path), raw_name)
    )


def clamp_hu(vol: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clamp attenuation values into the soft-tissue window [-100, 400] HU."""
    return Volume(np.clip(vol.data, lo, hi), vol.spacing)


def normalize_intensity(vol: Volume) -> Volume:
    """Affine map of the clamped window onto [0, 1]: (x + 100) / 500."""
    lo, hi = HU_WINDOW
    return Volume((vol.data - lo) / (hi - lo), vol.spacing)


def _z_sample_positions(nz: int, sz: float, target: float) -> tuple[int, np.ndarray]:
    new_nz = max(1, int(round(nz * sz / target)))
    centers = (np.arange(new_nz) + 0.5) * target
    return new_nz, centers / sz - 0.5  # fractional source slice indices


def resample_z(vol, target_mm: float, method: str | None = None):
    """Resample along z to the requested slice thickness.

    new nz = max(1, round(nz * sz / target)); output slices sample the input
    at slab centers.  Intensity volumes interpolate linearly, label volumes
    take the nearest slice (the default follows the input type).  Equal
    spacing returns an unchanged copy.
    """
    if target_mm <= 0:
        raise ValueError(f"target thickness must be positive, got {target_mm}")
    is_labels = isinstance(vol, LabelVolume)
    if method is None:
        method = "nearest" if is_labels else "linear"
    if method not in ("linear", "nearest"):
        raise ValueError(f"unknown method {method!r}")
    if is_labels and method == "linear":
        raise ValueError("label volumes must be resampled with nearest")

    sx, sy, sz = vol.spacing
    nz = vol.data.shape[0]
    if target_mm == sz:
        return type(vol)(vol.data.copy(), vol.spacing)

    _, pos = _z_sample_positions(nz, sz, target_mm)
    if method == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, nz - 1)
        data = vol.data[idx]
    else:
        i0 = np.clip(np.floor(pos).astype(int), 0, nz - 1)
        i1 = np.minimum(i0 + 1, nz - 1)
        w = np.clip(pos - i0, 0.0, 1.0).astype(np.float32)
        data = vol.data[i0] * (1.0 - w[:, None, None]) + vol.data[i1] * w[:, None, None]
    return type(vol)(data, (sx, sy, target_mm))


def _axis_linear(data: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    """Linear resize of one axis using the voxel-center mapping."""
    n = data.shape[axis]
    if n == new_len:
        return data
    pos = (np.arange(new_len) + 0.5) * (n / new_len) - 0.5
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = np.clip(pos - i0, 0.0, 1.0).astype(np.float32)
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i1, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = new_len
    w = w.reshape(shape)
    return lo * (1.0 - w) + hi * w


def _axis_nearest(data: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    n = data.shape[axis]
    if n == new_len:
        return data
    pos = (np.arange(new_len) + 0.5) * (n / new_len) - 0.5
    idx = np.clip(np.floor(pos + 0.5).astype(int), 0, n - 1)
    return np.take(data, idx, axis=axis)


def resize_axial(vol, target: int, method: str = "auto"):
    """Resize every axial slice to target x target.

    Square inputs whose side is an integer multiple of the target mean-pool
    (exact block averages); anything else interpolates bilinearly.  Label
    volumes always use nearest-neighbour.  In-plane spacing rescales by the
    size ratio so physical extent is preserved.
    """
    if target < 1:
        raise ValueError(f"target size must be positive, got {target}")
    nz, ny, nx = vol.data.shape
    is_labels = isinstance(vol, LabelVolume)
    if method not in ("auto", "mean-pool", "bilinear", "nearest"):
        raise ValueError(f"unknown method {method!r}")

    sx, sy, sz = vol.spacing
    new_spacing = (sx * nx / target, sy * ny / target, sz)
    if nx == target and ny == target:
        return type(vol)(vol.data.copy(), vol.spacing)

    if is_labels or method == "nearest":
        data = _axis_nearest(_axis_nearest(vol.data, 1, target), 2, target)
        return type(vol)(data, new_spacing)

    pool_ok = nx == ny and nx % target == 0 and nx > target
    if method == "mean-pool" and not pool_ok:
        raise ValueError(
            f"mean-pool needs square slices with side a multiple of {target}, got {nx}x{ny}"
        )
    if pool_ok and method in ("auto", "mean-pool"):
        f = nx // target
        data = vol.data.reshape(nz, target, f, target, f).mean(axis=(2, 4))
    else:
        data = _axis_linear(_axis_linear(vol.data, 1, target), 2, target)
    return type(vol)(data.astype(np.float32), new_spacing)


def stack_slices(vol: Volume, k: int) -> np.ndarray:
    """Three-channel slab around slice k: slices (k-1, k, k+1) with edge
    replication at the volume boundary.  Shape (3, ny, nx)."""
    nz = vol.data.shape[0]
    if not 0 <= k < nz:
        raise ValueError(f"slice {k} out of range for nz={nz}")
    idx = [max(k - 1, 0), k, min(k + 1, nz - 1)]
    return np.ascontiguousarray(vol.data[idx])


def resample_to_grid(data: np.ndarray, spacing, out_shape, out_spacing) -> np.ndarray:
    """Trilinear resample of (z, y, x) data onto a different voxel grid that
    shares the same physical origin.  Runs separably per axis, which keeps
    memory flat.  Used to carry probability maps back to an original grid."""
    sx, sy, sz = spacing
    ox, oy, oz = out_spacing
    out = data
    for axis, (n_out, s_in, s_out) in enumerate(
        ((out_shape[0], sz, oz), (out_shape[1], sy, oy), (out_shape[2], sx, ox))
    ):
        n_in = out.shape[axis]
        if n_in == n_out and s_in == s_out:
            continue
        pos = ((np.arange(n_out) + 0.5) * s_out) / s_in - 0.5
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = np.clip(pos - i0, 0.0, 1.0).astype(np.float32)
        lo = np.take(out, i0, axis=axis)
        hi = np.take(out, i1, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = n_out
        out = lo * (1.0 - w.reshape(shape)) + hi * w.reshape(shape)
    return out.astype(np.float32)

"""Overlap and surface-distance metrics for segmentation quality, plus a
plain-text / CSV report writer.

Conventions:
  - dice of two empty masks is 1.0 (perfect agreement on absence); VOE is 0.
  - RVD is signed, (|P| - |G|) / |G|, and undefined (NaN) when the ground
    truth is empty; undefined values are excluded from averages.
  - surface distances are symmetric in the pooled sense: mean / max / RMS are
    taken over the union of both directed distance sets, in millimetres,
    between voxel centers of border voxels.  They require both masks to be
    non-empty.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "dice",
    "global_dice",
    "overlap_metrics",
    "surface_distances",
    "burden_stats",
    "StructureMetrics",
    "CaseMetrics",
    "compute_case_metrics",
    "write_report",
]


def _binary(mask) -> np.ndarray:
    a = np.asarray(mask)
    return a if a.dtype == bool else a != 0


def dice(pred, gt) -> float:
    """Dice overlap; 1.0 when both masks are empty."""
    p = _binary(pred)
    g = _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / (np_ + ng)


def global_dice(pairs) -> float:
    """Dice over the pooled voxels of many (pred, gt) pairs."""
    inter = 0
    total = 0
    for p, g in pairs:
        pb, gb = _binary(p), _binary(g)
        if pb.shape != gb.shape:
            raise ValueError(f"shape mismatch {pb.shape} vs {gb.shape}")
        inter += int((pb & gb).sum())
        total += int(pb.sum()) + int(gb.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def overlap_metrics(pred, gt) -> tuple[float, float, float]:
    """(dice, voe, rvd).  VOE = 1 - Jaccard, 0 for two empty masks.  RVD is
    NaN when gt is empty."""
    p = _binary(pred)
    g = _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    np_, ng = int(p.sum()), int(g.sum())
    inter = int((p & g).sum())
    union = np_ + ng - inter
    d = 1.0 if np_ + ng == 0 else 2.0 * inter / (np_ + ng)
    voe = 0.0 if union == 0 else 1.0 - inter / union
    rvd = math.nan if ng == 0 else (np_ - ng) / ng
    return d, voe, rvd


def _border_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Voxel-center coordinates (mm) of mask voxels with at least one empty
    6-neighbor; voxels at the volume edge count as border."""
    m = _binary(mask)
    interior = m.copy()
    for axis in range(3):
        interior &= np.roll(m, 1, axis) & np.roll(m, -1, axis)
        # roll wraps around; kill the wrapped faces so edge voxels stay border
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, 1)
        hi[axis] = slice(-1, None)
        interior[tuple(lo)] = False
        interior[tuple(hi)] = False
    border = m & ~interior
    zz, yy, xx = np.nonzero(border)
    sx, sy, sz = spacing
    return np.stack([(xx + 0.5) * sx, (yy + 0.5) * sy, (zz + 0.5) * sz], axis=1)


def surface_distances(pred, gt, spacing) -> tuple[float, float, float]:
    """(assd, mssd, rmsd) in mm between the border surfaces of two masks.

    Distances are measured both ways (pred border to nearest gt border and
    vice versa) and pooled before taking mean, max, and root-mean-square.
    Raises ValueError when either mask is empty.
    """
    p = _binary(pred)
    g = _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise ValueError("surface distances need two non-empty masks")
    pp = _border_points(p, spacing)
    gp = _border_points(g, spacing)
    d_pg = cKDTree(gp).query(pp, k=1)[0]
    d_gp = cKDTree(pp).query(gp, k=1)[0]
    pooled = np.concatenate([d_pg, d_gp])
    assd = float(pooled.mean())
    mssd = float(pooled.max())
    rmsd = float(np.sqrt(np.mean(pooled**2)))
    return assd, mssd, rmsd


def burden_stats(pairs) -> tuple[float, float]:
    """(rmse, max absolute error) of predicted vs true tumor burden pairs."""
    arr = np.asarray(list(pairs), dtype=np.float64)
    if arr.size == 0:
        return 0.0, 0.0
    err = arr[:, 0] - arr[:, 1]
    return float(np.sqrt(np.mean(err**2))), float(np.max(np.abs(err)))


@dataclass
class StructureMetrics:
    dice: float
    voe: float
    rvd: float  # NaN when the ground truth is empty
    assd: float | None  # None when a surface is undefined (an empty mask)
    mssd: float | None
    rmsd: float | None
    intersection: int
    pred_voxels: int
    gt_voxels: int


@dataclass
class CaseMetrics:
    case_id: str
    liver: StructureMetrics
    tumor: StructureMetrics
    burden_pred: float
    burden_true: float


def _structure(pred, gt, spacing) -> StructureMetrics:
    p = _binary(pred)
    g = _binary(gt)
    d, voe, rvd = overlap_metrics(p, g)
    if p.any() and g.any():
        assd, mssd, rmsd = surface_distances(p, g, spacing)
    else:
        assd = mssd = rmsd = None
    return StructureMetrics(
        dice=d, voe=voe, rvd=rvd, assd=assd, mssd=mssd, rmsd=rmsd,
        intersection=int((p & g).sum()),
        pred_voxels=int(p.sum()), gt_voxels=int(g.sum()),
    )


def _burden(labels: np.ndarray) -> float:
    organ = int((labels >= 1).sum())
    if organ == 0:
        return 0.0
    return int((labels == 2).sum()) / organ


def compute_case_metrics(case_id: str, pred_labels, gt_labels, spacing,
                         gt_spacing=None) -> CaseMetrics:
    """Per-case metrics from two label volumes (0 background, 1 organ,
    2 lesion).  The organ structure is label >= 1, lesions are label == 2."""
    p = np.asarray(pred_labels)
    g = np.asarray(gt_labels)
    if p.shape != g.shape:
        raise ValueError(f"{case_id}: prediction grid {p.shape} does not match "
                         f"ground truth {g.shape}")
    if gt_spacing is not None and not np.allclose(spacing, gt_spacing):
        raise ValueError(f"{case_id}: spacing {tuple(spacing)} does not match "
                         f"ground truth {tuple(gt_spacing)}")
    return CaseMetrics(
        case_id=case_id,
        liver=_structure(p >= 1, g >= 1, spacing),
        tumor=_structure(p == 2, g == 2, spacing),
        burden_pred=_burden(p),
        burden_true=_burden(g),
    )


def _mean_defined(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _pooled(rows, attr) -> float:
    inter = sum(getattr(r, attr).intersection for r in rows)
    total = sum(getattr(r, attr).pred_voxels + getattr(r, attr).gt_voxels
                for r in rows)
    return 1.0 if total == 0 else 2.0 * inter / total


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v:.4f}"


def _structure_section(lines, rows, name: str, attr: str):
    lines.append(f"{name}")
    lines.append(f"  Dice/case : {_fmt(_mean_defined(getattr(r, attr).dice for r in rows))}")
    lines.append(f"  Dice global: {_fmt(_pooled(rows, attr))}")
    lines.append(f"  VOE       : {_fmt(_mean_defined(getattr(r, attr).voe for r in rows))}")
    lines.append(f"  RVD       : {_fmt(_mean_defined(getattr(r, attr).rvd for r in rows))}")
    lines.append(f"  ASSD (mm) : {_fmt(_mean_defined(getattr(r, attr).assd for r in rows))}")
    lines.append(f"  MSSD (mm) : {_fmt(_mean_defined(getattr(r, attr).mssd for r in rows))}")
    lines.append(f"  RMSD (mm) : {_fmt(_mean_defined(getattr(r, attr).rmsd for r in rows))}")
    lines.append("")


_CSV_COLUMNS = [
    "case_id",
    "liver_dice", "liver_voe", "liver_rvd", "liver_assd", "liver_mssd", "liver_rmsd",
    "tumor_dice", "tumor_voe", "tumor_rvd", "tumor_assd", "tumor_mssd", "tumor_rmsd",
    "burden_pred", "burden_true",
]


def write_report(rows: list[CaseMetrics], txt_path, csv_path) -> None:
    """Write the human-readable summary and the per-case CSV.  An empty row
    list still produces both files with headers only."""
    lines = ["Segmentation evaluation", f"Cases: {len(rows)}", ""]
    if rows:
        _structure_section(lines, rows, "Liver", "liver")
        _structure_section(lines, rows, "Tumor", "tumor")
        rmse, mx = burden_stats((r.burden_pred, r.burden_true) for r in rows)
        lines.append("Tumor burden")
        lines.append(f"  RMSE      : {_fmt(rmse)}")
        lines.append(f"  Max error : {_fmt(mx)}")
        lines.append("")
        lines.append("Per case")
        for r in rows:
            lines.append(
                f"  {r.case_id}: liver dice {_fmt(r.liver.dice)}, "
                f"tumor dice {_fmt(r.tumor.dice)}, "
                f"burden {_fmt(r.burden_pred)} (true {_fmt(r.burden_true)})"
            )
        lines.append("")
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))

    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(_CSV_COLUMNS)
        for r in rows:
            w.writerow([
                r.case_id,
                *(_csv_val(v) for v in (r.liver.dice, r.liver.voe, r.liver.rvd,
                                        r.liver.assd, r.liver.mssd, r.liver.rmsd)),
                *(_csv_val(v) for v in (r.tumor.dice, r.tumor.voe, r.tumor.rvd,
                                        r.tumor.assd, r.tumor.mssd, r.tumor.rmsd)),
                _csv_val(r.burden_pred), _csv_val(r.burden_true),
            ])


def _csv_val(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6f}"

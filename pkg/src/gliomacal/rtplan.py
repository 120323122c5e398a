"""Radiotherapy target volumes built from tumor-density maps.

Clinical target volumes (CTVs) are either a superlevel set of a density map
or a uniform Euclidean margin around the visible tumor. Efficiency is the
percentage of a recurrence that a CTV covers.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import GridMeta, Volume

DEFAULT_CTV_THRESHOLD = 0.001
DEFAULT_MARGIN_MM = 20.0
DEFAULT_ESCALATION = (0.001, 0.25, 0.5, 0.75)


class PlanKind(str, Enum):
    MAP_THRESHOLD = "MAP_THRESHOLD"
    RTOG_MARGIN = "RTOG_MARGIN"


@dataclass(frozen=True, eq=False)
class CtvPlan:
    mask: Volume
    label: PlanKind
    threshold_or_margin: float
    name: str = ""

    @property
    def volume_cc(self) -> float:
        return int(np.count_nonzero(self.mask.data)) * self.mask.meta.voxel_volume_mm3 / 1000.0

    @property
    def bool_mask(self) -> np.ndarray:
        return self.mask.data > 0.5

    def display_name(self) -> str:
        if self.name:
            return self.name
        if self.label is PlanKind.MAP_THRESHOLD:
            return f"map_u>={self.threshold_or_margin:g}"
        return f"rtog_{self.threshold_or_margin:g}mm"


@dataclass(frozen=True, eq=False)
class EscalationPlan:
    levels: tuple[tuple[float, Volume], ...]

    def volumes_cc(self) -> list[float]:
        return [int(np.count_nonzero(m.data)) * m.meta.voxel_volume_mm3 / 1000.0 for _, m in self.levels]


def _as_array(x) -> tuple[np.ndarray, GridMeta | None]:
    if isinstance(x, Volume):
        return np.asarray(x.data), x.meta
    return np.asarray(x), None


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def ctv_from_map(map_u: Volume, threshold: float = DEFAULT_CTV_THRESHOLD, largest_cc: bool = False) -> CtvPlan:
    """CTV as the superlevel set ``map_u >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    mask = np.asarray(map_u.data) >= threshold
    if largest_cc and mask.any():
        mask = _largest_component(mask)
    if not mask.any():
        warnings.warn(f"CTV at threshold {threshold} is empty", RuntimeWarning, stacklevel=2)
    return CtvPlan(Volume(map_u.meta, mask), PlanKind.MAP_THRESHOLD, float(threshold))


def ctv_rtog(
    visible_seg: Volume, margin_mm: float = DEFAULT_MARGIN_MM, brain_mask=None
) -> CtvPlan:
    """Visible tumor grown by ``margin_mm`` (exact Euclidean distance), clipped to ``brain_mask``."""
    if margin_mm < 0:
        raise ValueError("margin must be nonnegative")
    seg = np.asarray(visible_seg.data) > 0.5
    if not seg.any():
        raise ValueError("visible segmentation is empty")
    if margin_mm == 0:
        mask = seg.copy()
    else:
        dist = ndimage.distance_transform_edt(~seg, sampling=visible_seg.meta.spacing_mm)
        mask = dist <= margin_mm
    if brain_mask is not None:
        brain, _ = _as_array(brain_mask)
        if brain.shape != mask.shape:
            raise ValueError("brain mask is on a different grid")
        mask &= brain > 0.5
    return CtvPlan(Volume(visible_seg.meta, mask), PlanKind.RTOG_MARGIN, float(margin_mm))


def efficiency(ctv: CtvPlan, recurrence) -> float:
    """Percentage of recurrence voxels inside the CTV."""
    rec, _ = _as_array(recurrence)
    rec = rec > 0.5
    mask = ctv.bool_mask
    if rec.shape != mask.shape:
        raise ValueError("recurrence and CTV are on different grids")
    n = int(np.count_nonzero(rec))
    if n == 0:
        raise ValueError("recurrence mask is empty")
    return 100.0 * int(np.count_nonzero(rec & mask)) / n


def escalation(map_u: Volume, thresholds=DEFAULT_ESCALATION) -> EscalationPlan:
    """Nested dose-escalation levels, one superlevel set per ascending threshold."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("at least one threshold is required")
    if any(not 0 < t < 1 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending")
    u = np.asarray(map_u.data)
    return EscalationPlan(tuple((t, Volume(map_u.meta, u >= t)) for t in thresholds))


def compare_plans(plans, recurrence, out_dir=None) -> list[dict]:
    """Volume and efficiency per plan; an unusable recurrence gives error rows."""
    rows = []
    for plan in plans:
        row = {"plan": plan.display_name(), "label": plan.label.value, "volume_cc": plan.volume_cc}
        try:
            row["efficiency_percent"] = efficiency(plan, recurrence)
        except ValueError as exc:
            row["efficiency_percent"] = None
            row["error"] = str(exc)
        rows.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(rows, indent=1))
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["plan", "label", "volume_cc", "efficiency_percent", "error"])
            w.writeheader()
            for row in rows:
                w.writerow(row)
    return rows

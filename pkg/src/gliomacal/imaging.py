"""Likelihood of MRI segmentations and FET-PET uptake given a tumor density.

Segmentations are Bernoulli with a double-logistic detection probability
around a modality-specific visibility threshold; FET is the density scaled by
``1/b`` plus i.i.d. Gaussian noise, evaluated on a stencil whose points are
far enough apart (4 mm, the PET resolution) to be treated as independent.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import GridMeta, Volume, load_any, write_volume

PROB_EPS = 1e-12
STENCIL_SEP_MM = 4.0
STENCIL_MARGIN_MM = 8.0


@dataclass(frozen=True)
class ImagingParams:
    uc_t1gd: float
    uc_flair: float
    sigma2_alpha: float
    b: float
    sigma: float

    def __post_init__(self):
        if not (0 < self.uc_t1gd < 1 and 0 < self.uc_flair < 1):
            raise ValueError("visibility thresholds must lie in (0, 1)")
        if self.uc_flair >= self.uc_t1gd:
            raise ValueError("FLAIR threshold must be below the T1Gd threshold")
        if min(self.sigma2_alpha, self.b, self.sigma) <= 0:
            raise ValueError("sigma2_alpha, b and sigma must be positive")


@dataclass(frozen=True, eq=False)
class Observations:
    """Binary segmentations, normalised FET and the FET evaluation stencil.

    ``fet_stencil`` is an ``(K, 3)`` integer array of voxel indices.
    """

    meta: GridMeta
    seg_t1gd: np.ndarray
    seg_flair: np.ndarray
    fet: np.ndarray
    fet_stencil: np.ndarray
    healthy_mask: np.ndarray | None = None

    def __post_init__(self):
        for name in ("seg_t1gd", "seg_flair", "fet"):
            if getattr(self, name).shape != self.meta.dims:
                raise ValueError(f"{name} is not on the observation grid {self.meta.dims}")
        stencil = np.asarray(self.fet_stencil, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "fet_stencil", stencil)
        object.__setattr__(self, "seg_t1gd", np.asarray(self.seg_t1gd, dtype=bool))
        object.__setattr__(self, "seg_flair", np.asarray(self.seg_flair, dtype=bool))
        object.__setattr__(self, "fet", np.asarray(self.fet, dtype=np.float64))

    def stencil_values(self, field: np.ndarray) -> np.ndarray:
        i, j, k = self.fet_stencil.T
        return field[i, j, k]


def alpha(u, u_c, sigma2_alpha):
    """Detection probability; works on scalars and arrays, clamped to [eps, 1-eps]."""
    d = np.asarray(u, dtype=np.float64) - u_c
    a = 0.5 + 0.5 * np.sign(d) * (1.0 - np.exp(-(d * d) / sigma2_alpha))
    a = np.clip(a, PROB_EPS, 1.0 - PROB_EPS)
    return float(a) if a.ndim == 0 else a


def _check_grid(*arrays):
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays[1:]):
        raise ValueError(f"grid mismatch: {[a.shape for a in arrays]}")


def loglik_segmentation(u, seg, u_c, sigma2_alpha, domain_mask) -> float:
    u, seg, domain_mask = (np.asarray(a) for a in (u, seg, domain_mask))
    _check_grid(u, seg, domain_mask)
    uu = u[domain_mask]
    y = seg[domain_mask].astype(bool)
    a = alpha(uu, u_c, sigma2_alpha)
    return float(np.sum(np.where(y, np.log(a), np.log1p(-a))))


def loglik_fet(u, fet, stencil, b, sigma) -> float:
    stencil = np.asarray(stencil, dtype=np.int64).reshape(-1, 3)
    if stencil.shape[0] == 0:
        raise ValueError("FET stencil is empty")
    i, j, k = stencil.T
    return _gaussian_loglik(np.asarray(fet)[i, j, k], np.asarray(u)[i, j, k], b, sigma)


def _gaussian_loglik(y, u, b, sigma) -> float:
    r = np.asarray(y, dtype=np.float64) - np.asarray(u, dtype=np.float64) / b
    n = r.size
    return float(-0.5 * n * math.log(2 * math.pi * sigma * sigma) - np.sum(r * r) / (2 * sigma * sigma))


def loglik_total(u, obs: Observations, params: ImagingParams, domain_mask, use_fet: bool = True) -> float:
    """Sum of the T1Gd, FLAIR and (optionally) FET log-likelihoods.

    With ``use_fet=False`` the FET term contributes 0 (MRI-only calibration).
    """
    u = np.asarray(u)
    _check_grid(u, obs.seg_t1gd, np.asarray(domain_mask))
    total = loglik_segmentation(u, obs.seg_t1gd, params.uc_t1gd, params.sigma2_alpha, domain_mask)
    total += loglik_segmentation(u, obs.seg_flair, params.uc_flair, params.sigma2_alpha, domain_mask)
    if use_fet:
        total += loglik_fet(u, obs.fet, obs.fet_stencil, params.b, params.sigma)
    return total


def normalize_fet(raw, healthy_mask) -> np.ndarray:
    """Baseline-subtracted FET scaled to [0, 1].

    The baseline is the median over ``healthy_mask``. A scan with no uptake
    above baseline yields all zeros and a ``RuntimeWarning``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    healthy_mask = np.asarray(healthy_mask, dtype=bool)
    _check_grid(raw, healthy_mask)
    if not healthy_mask.any():
        raise ValueError("healthy-tissue mask is empty")
    if raw.min() < 0:
        raise ValueError("raw FET must be nonnegative")
    shifted = raw - np.median(raw[healthy_mask])
    peak = shifted.max()
    if not peak > 0:
        warnings.warn("FET has no uptake above baseline; returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(raw)
    return np.clip(shifted / peak, 0.0, 1.0)


def build_stencil(meta: GridMeta, roi_mask, min_sep_mm: float = STENCIL_SEP_MM) -> np.ndarray:
    """Voxels of a regular sub-grid anchored at index 0 that fall in ``roi_mask``."""
    roi_mask = np.asarray(roi_mask, dtype=bool)
    strides = [max(int(math.ceil(min_sep_mm / h - 1e-9)), 1) for h in meta.spacing_mm]
    sub = np.zeros(meta.dims, dtype=bool)
    sub[:: strides[0], :: strides[1], :: strides[2]] = True
    return np.argwhere(sub & roi_mask)


def dilate_mm(mask, spacing_mm, radius_mm: float) -> np.ndarray:
    """Voxels within ``radius_mm`` (Euclidean, physical units) of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if radius_mm <= 0 or not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask, sampling=spacing_mm)
    return dist <= radius_mm


def fet_roi(seg_flair, domain_mask, spacing_mm, margin_mm: float = STENCIL_MARGIN_MM) -> np.ndarray:
    return dilate_mm(seg_flair, spacing_mm, margin_mm) & np.asarray(domain_mask, dtype=bool)


def make_observations(
    meta: GridMeta,
    seg_t1gd,
    seg_flair,
    fet,
    domain_mask,
    healthy_mask=None,
    min_sep_mm: float = STENCIL_SEP_MM,
    margin_mm: float = STENCIL_MARGIN_MM,
) -> Observations:
    roi = fet_roi(seg_flair, domain_mask, meta.spacing_mm, margin_mm)
    return Observations(
        meta,
        np.asarray(seg_t1gd) > 0.5,
        np.asarray(seg_flair) > 0.5,
        fet,
        build_stencil(meta, roi, min_sep_mm),
        None if healthy_mask is None else np.asarray(healthy_mask) > 0.5,
    )


def load_observations(manifest_path, domain_mask) -> Observations:
    """Read ``{"t1gd", "flair", "fet", "healthy_mask"}`` container volumes.

    If the manifest sets ``"fet_normalized": false`` the FET volume is treated
    as raw uptake and normalised against ``healthy_mask``.
    """
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    vols = {}
    for key in ("t1gd", "flair", "fet", "healthy_mask"):
        if key in spec:
            vols[key] = load_any(base / spec[key])
    missing = {"t1gd", "flair", "fet"} - vols.keys()
    if missing:
        raise ValueError(f"observation manifest lacks {sorted(missing)}")
    meta = vols["t1gd"].meta
    if any(v.meta.dims != meta.dims for v in vols.values()):
        raise ValueError("observation volumes are on different grids")
    healthy = vols["healthy_mask"].data > 0.5 if "healthy_mask" in vols else None
    fet = vols["fet"].data.astype(np.float64)
    if not spec.get("fet_normalized", True):
        if healthy is None:
            raise ValueError("raw FET needs a healthy_mask for baseline subtraction")
        fet = normalize_fet(fet, healthy)
    return make_observations(
        meta,
        vols["t1gd"].data,
        vols["flair"].data,
        fet,
        domain_mask,
        healthy,
        spec.get("stencil_sep_mm", STENCIL_SEP_MM),
        spec.get("stencil_margin_mm", STENCIL_MARGIN_MM),
    )


def save_observations(directory, obs: Observations) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(directory / "t1gd.vol", Volume(obs.meta, obs.seg_t1gd))
    write_volume(directory / "flair.vol", Volume(obs.meta, obs.seg_flair))
    write_volume(directory / "fet.vol", Volume(obs.meta, obs.fet))
    manifest = {"t1gd": "t1gd.vol", "flair": "flair.vol", "fet": "fet.vol"}
    if obs.healthy_mask is not None:
        write_volume(directory / "healthy_mask.vol", Volume(obs.meta, obs.healthy_mask))
        manifest["healthy_mask"] = "healthy_mask.vol"
    path = directory / "observations.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path

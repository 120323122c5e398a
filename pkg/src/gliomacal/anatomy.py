"""Simulation domain built from tissue-fraction maps."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume_io import GridMeta, Volume, load_any, write_volume

# grey-matter diffusivity is a fixed fraction of the white-matter one
GREY_TO_WHITE = 0.1
_RANGE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Anatomy:
    """Tissue fractions and the no-flux domain.

    ``brain`` marks everything inside the head that is not skull/background
    (domain plus CSF); it is used to clip dilated target volumes.
    """

    meta: GridMeta
    p_w: np.ndarray
    p_g: np.ndarray
    in_domain: np.ndarray
    brain: np.ndarray

    def __post_init__(self):
        for name in ("p_w", "p_g", "in_domain", "brain"):
            arr = getattr(self, name)
            if arr.shape != self.meta.dims:
                raise ValueError(f"{name} has shape {arr.shape}, grid is {self.meta.dims}")
            arr.setflags(write=False)

    @property
    def n_domain(self) -> int:
        return int(self.in_domain.sum())


def _checked(vol: Volume, name: str) -> np.ndarray:
    arr = vol.data.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    if arr.min() < -_RANGE_TOL or arr.max() > 1 + _RANGE_TOL:
        raise ValueError(f"{name}: values outside [0, 1] ({arr.min()}, {arr.max()})")
    return np.clip(arr, 0.0, 1.0)


def build_anatomy(
    p_w: Volume, p_g: Volume, csf: Volume, threshold: float = 0.1, csf_cut: float = 0.5
) -> Anatomy:
    if not (p_w.meta == p_g.meta == csf.meta):
        raise ValueError("tissue volumes are on different grids")
    w = _checked(p_w, "white matter")
    g = _checked(p_g, "grey matter")
    c = _checked(csf, "csf")

    total = w + g
    over = total > 1.0
    w[over] /= total[over]
    g[over] /= total[over]
    total = w + g

    in_domain = (total >= threshold) & (total > 0) & (c < csf_cut)
    brain = in_domain | (c >= csf_cut)
    return Anatomy(p_w.meta, w, g, in_domain, brain)


def diffusivity(anatomy: Anatomy, D_w: float) -> np.ndarray:
    """Per-voxel diffusivity (mm^2/day); grey matter diffuses at D_w/10, zero off-domain."""
    if not np.isfinite(D_w) or D_w <= 0:
        raise ValueError(f"D_w must be positive, got {D_w}")
    D = anatomy.p_w * D_w + anatomy.p_g * (D_w * GREY_TO_WHITE)
    return np.where(anatomy.in_domain, D, 0.0)


def load_anatomy(manifest_path, threshold: float = 0.1, csf_cut: float = 0.5) -> Anatomy:
    """Load ``{"wm": ..., "gm": ..., "csf": ...}`` with paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    try:
        vols = [load_any(base / spec[key]) for key in ("wm", "gm", "csf")]
    except KeyError as exc:
        raise ValueError(f"anatomy manifest lacks {exc}") from exc
    return build_anatomy(*vols, threshold=threshold, csf_cut=csf_cut)


def save_anatomy(directory, anatomy: Anatomy, csf: np.ndarray | None = None) -> Path:
    """Write the three tissue volumes and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if csf is None:
        csf = (anatomy.brain & ~anatomy.in_domain).astype(np.float32)
    write_volume(directory / "wm.vol", Volume(anatomy.meta, anatomy.p_w))
    write_volume(directory / "gm.vol", Volume(anatomy.meta, anatomy.p_g))
    write_volume(directory / "csf.vol", Volume(anatomy.meta, csf))
    manifest = directory / "anatomy.json"
    manifest.write_text(json.dumps({"wm": "wm.vol", "gm": "gm.vol", "csf": "csf.vol"}, indent=1))
    return manifest

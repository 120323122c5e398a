"""Procedural brain phantom and synthetic ground-truth observations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .anatomy import Anatomy, build_anatomy
from .growth import SolverConfig, simulate_array
from .imaging import Observations, dilate_mm, make_observations, save_observations
from .priors import Theta
from .volume_io import GridMeta, Volume, write_volume

HEALTHY_DISTANCE_MM = 20.0


def _ramp(signed_dist, width):
    """Partial-volume fraction from a signed distance (negative inside)."""
    return np.clip(0.5 - signed_dist / width, 0.0, 1.0)


def _ellipsoid_sd(x, y, z, centre, axes):
    q = np.sqrt(
        ((x - centre[0]) / axes[0]) ** 2
        + ((y - centre[1]) / axes[1]) ** 2
        + ((z - centre[2]) / axes[2]) ** 2
    )
    return (q - 1.0) * min(axes)


def phantom_tissues(dims=(64, 64, 64), spacing_mm=1.0) -> tuple[Volume, Volume, Volume]:
    """White/grey/CSF fractions of a sphere-like brain with ventricles.

    The brain is an ellipsoid with a grey-matter cortical rim over white
    matter, two lateral ventricles, a deep grey nucleus beside each of them,
    and a CSF falx splitting the upper half of the two hemispheres.
    """
    if np.isscalar(spacing_mm):
        spacing_mm = (float(spacing_mm),) * 3
    meta = GridMeta(dims, spacing_mm)
    xs, ys, zs = meta.coordinates()
    x, y, z = np.meshgrid(xs, ys, zs, indexing="ij")
    ext = np.array(dims) * np.array(spacing_mm)
    c = np.array([(a[0] + a[-1]) / 2 for a in (xs, ys, zs)])
    h = min(spacing_mm)

    brain_axes = ext * np.array([0.44, 0.46, 0.40])
    sd_brain = _ellipsoid_sd(x, y, z, c, brain_axes)
    rim = 0.09 * min(brain_axes)
    brain = _ramp(sd_brain, h)
    white = _ramp(sd_brain + rim, h)

    csf = np.zeros_like(brain)
    for side in (-1, 1):
        vc = c + np.array([side * 0.07, 0.02, 0.03]) * ext
        csf = np.maximum(csf, _ramp(_ellipsoid_sd(x, y, z, vc, ext * np.array([0.035, 0.15, 0.06])), h))
        nc = c + np.array([side * 0.14, -0.03, -0.02]) * ext
        deep = _ramp(_ellipsoid_sd(x, y, z, nc, ext * np.array([0.05, 0.06, 0.05])), h)
        white = np.minimum(white, 1.0 - deep)
    falx = _ramp(np.abs(x - c[0]) - 0.5 * h, h) * (z > c[2] + 0.05 * ext[2])
    csf = np.maximum(csf, falx) * brain

    white = white * brain
    grey = brain - white
    tissue = 1.0 - csf
    wm, gm = white * tissue, grey * tissue
    return Volume(meta, wm), Volume(meta, gm), Volume(meta, csf)


def phantom_anatomy(dims=(64, 64, 64), spacing_mm=1.0, threshold: float = 0.1) -> Anatomy:
    return build_anatomy(*phantom_tissues(dims, spacing_mm), threshold=threshold)


def default_seed_mm(meta: GridMeta) -> tuple[float, float, float]:
    """A white-matter seed in the right hemisphere, off the voxel lattice."""
    xs, ys, zs = meta.coordinates()
    ext = np.array(meta.dims) * np.array(meta.spacing_mm)
    c = np.array([(a[0] + a[-1]) / 2 for a in (xs, ys, zs)])
    off = np.array([0.17, 0.11, 0.05]) * ext + 0.37 * np.array(meta.spacing_mm)
    return tuple(float(v) for v in c + off)


@dataclass
class SyntheticSpec:
    """Ground truth for a synthetic case.

    Dynamics and imaging defaults are the reference synthetic case
    (D_w=0.13, rho=0.025, T=302, thresholds 0.7/0.25, noise 0.023). The seed
    defaults to :func:`default_seed_mm` on the phantom. ``sigma2_alpha`` only
    matters when re-scoring the truth; segmentations are hard thresholds.
    """

    D_w: float = 0.13
    rho: float = 0.025
    T: float = 302.0
    ic_mm: tuple[float, float, float] | None = None
    uc_t1gd: float = 0.7
    uc_flair: float = 0.25
    noise_sigma: float = 0.023
    sigma2_alpha: float = 0.05
    noise_seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.uc_flair < self.uc_t1gd:
            raise ValueError("FLAIR threshold must be below the T1Gd threshold")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "solver"}
        d["solver"] = vars(self.solver).copy()
        return d

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        solver = SolverConfig(**data.pop("solver", {}))
        for key in ("ic_mm", "dims"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(solver=solver, **data)


@dataclass
class SyntheticCase:
    observations: Observations
    gt_u: np.ndarray
    gt_theta: Theta


def generate(spec: SyntheticSpec, anatomy: Anatomy) -> SyntheticCase:
    """Threshold a simulated truth into segmentations and a noisy normalised FET.

    FET: the true density inside the union of both segmentations, plus
    zero-mean Gaussian noise on every domain voxel, divided by its maximum
    and clamped to [0, 1]. The returned truth reports that maximum as ``b``
    and the noise level on the normalised scale as ``sigma``.
    """
    meta = anatomy.meta
    ic = spec.ic_mm if spec.ic_mm is not None else default_seed_mm(meta)
    gt = Theta(spec.D_w, spec.rho, spec.T, *ic, spec.uc_t1gd, spec.uc_flair, spec.sigma2_alpha, 1.0, 1.0)
    u = simulate_array(anatomy, gt.growth(), spec.solver)

    t1 = u >= spec.uc_t1gd
    flair = u >= spec.uc_flair
    if not t1.any() or not flair.any():
        raise ValueError("ground-truth tumor is empty at the visibility thresholds")

    rng = np.random.default_rng(spec.noise_seed)
    signal = np.where(t1 | flair, u, 0.0)
    noise = rng.standard_normal(meta.dims) * spec.noise_sigma
    raw = np.where(anatomy.in_domain, signal + noise, 0.0)
    scale = float(raw.max())
    # float32-representable so the on-disk copy is identical
    fet = np.clip(raw / scale, 0.0, 1.0).astype(np.float32).astype(np.float64)

    healthy = anatomy.in_domain & ~dilate_mm(flair, meta.spacing_mm, HEALTHY_DISTANCE_MM)
    obs = make_observations(meta, t1, flair, fet, anatomy.in_domain, healthy)
    sigma_eff = spec.noise_sigma / scale if spec.noise_sigma > 0 else 0.0
    gt = replace(gt, b=scale, sigma=sigma_eff)
    return SyntheticCase(obs, u, gt)


def save_case(directory, case: SyntheticCase, spec: SyntheticSpec | None = None) -> Path:
    directory = Path(directory)
    manifest = save_observations(directory, case.observations)
    write_volume(directory / "gt_u.vol", Volume(case.observations.meta, case.gt_u))
    (directory / "gt_theta.json").write_text(json.dumps(case.gt_theta.to_dict(), indent=1))
    if spec is not None:
        (directory / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    return manifest

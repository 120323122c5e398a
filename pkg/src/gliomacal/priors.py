"""Independent box prior over the 11 model parameters.

All positive parameters are log-uniform; the seed coordinates are uniform
over a cube around the tumor's centre of mass (a log-uniform density on
coordinates would depend on where the grid origin sits). Sampling happens in
"sampling space", where every coordinate is uniform over a box: ``ln(theta)``
for the log-uniform parameters and ``theta`` itself for the seed coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from .growth import GrowthParams
from .imaging import ImagingParams
from .volume_io import GridMeta

PARAM_NAMES = (
    "D_w", "rho", "T", "ic_x", "ic_y", "ic_z",
    "uc_t1gd", "uc_flair", "sigma2_alpha", "b", "sigma",
)
LINEAR_PARAMS = frozenset({"ic_x", "ic_y", "ic_z"})
LOG_MASK = np.array([name not in LINEAR_PARAMS for name in PARAM_NAMES])

FIXED_RANGES = {
    "D_w": (0.013, 3.8),
    "rho": (0.0027, 0.19),
    "uc_t1gd": (0.5, 0.85),
    "uc_flair": (0.05, 0.5),
    "sigma2_alpha": (0.05, 0.1),
    "sigma": (0.015, 0.2),
    "b": (0.5, 1.02),
}
T_MIN_DAYS = 30.0
T_PAD_DAYS = 365.0


@dataclass(frozen=True)
class Theta:
    D_w: float
    rho: float
    T: float
    ic_x: float
    ic_y: float
    ic_z: float
    uc_t1gd: float
    uc_flair: float
    sigma2_alpha: float
    b: float
    sigma: float

    @classmethod
    def from_array(cls, values) -> "Theta":
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def growth(self) -> GrowthParams:
        return GrowthParams(self.D_w, self.rho, self.T, (self.ic_x, self.ic_y, self.ic_z))

    def imaging(self) -> ImagingParams:
        return ImagingParams(self.uc_t1gd, self.uc_flair, self.sigma2_alpha, self.b, self.sigma)


@dataclass
class PriorSpec:
    bounds: dict[str, tuple[float, float]]
    r_max_mm: float = float("nan")
    com_mm: tuple[float, float, float] = field(default=(float("nan"),) * 3)

    def __post_init__(self):
        missing = set(PARAM_NAMES) - self.bounds.keys()
        if missing:
            raise ValueError(f"prior lacks bounds for {sorted(missing)}")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi or (name not in LINEAR_PARAMS and lo <= 0):
                raise ValueError(f"invalid bounds for {name}: ({lo}, {hi})")
        self.bounds = {k: (float(v[0]), float(v[1])) for k, v in self.bounds.items()}

    def lower(self) -> np.ndarray:
        return np.array([self.bounds[n][0] for n in PARAM_NAMES])

    def upper(self) -> np.ndarray:
        return np.array([self.bounds[n][1] for n in PARAM_NAMES])

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """Support in sampling space."""
        return to_sampling(self.lower()), to_sampling(self.upper())

    def to_json(self) -> dict:
        return {
            "bounds": {k: list(v) for k, v in self.bounds.items()},
            "r_max_mm": self.r_max_mm,
            "com_mm": list(self.com_mm),
        }

    @classmethod
    def from_json(cls, data: dict) -> "PriorSpec":
        return cls(
            {k: tuple(v) for k, v in data["bounds"].items()},
            data.get("r_max_mm", float("nan")),
            tuple(data.get("com_mm", (float("nan"),) * 3)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "PriorSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def to_sampling(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.where(LOG_MASK, np.log(np.where(LOG_MASK, theta, 1.0)), theta)


def from_sampling(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(LOG_MASK, np.exp(z), z)


def min_wave_speed(bounds=FIXED_RANGES) -> float:
    return 2.0 * math.sqrt(bounds["D_w"][0] * bounds["rho"][0])


def default_prior(seg_flair, meta: GridMeta) -> PriorSpec:
    """Prior ranges with T and seed bounds derived from the visible tumor.

    The seed cube is clipped to the grid's voxel-centre bounding box.
    """
    seg = np.asarray(seg_flair, dtype=bool)
    if not seg.any():
        raise ValueError("segmentation is empty")
    pts = np.argwhere(seg) * np.asarray(meta.spacing_mm) + np.asarray(meta.origin_mm)
    com = pts.mean(axis=0)
    r_max = float(np.sqrt(((pts - com) ** 2).sum(axis=1)).max())

    bounds = dict(FIXED_RANGES)
    t_max = r_max / min_wave_speed()
    bounds["T"] = (T_MIN_DAYS, max(t_max + T_PAD_DAYS, T_MIN_DAYS + 1.0))
    lo, hi = meta.bounds_mm()
    half = max(r_max, 0.5 * max(meta.spacing_mm))
    for axis, name in enumerate(("ic_x", "ic_y", "ic_z")):
        bounds[name] = (max(com[axis] - half, lo[axis]), min(com[axis] + half, hi[axis]))
    return PriorSpec(bounds, r_max, tuple(float(c) for c in com))


def log_prior(theta, spec: PriorSpec) -> float:
    """Constant on the support, -inf outside."""
    theta = np.asarray(theta, dtype=np.float64)
    lo, hi = spec.lower(), spec.upper()
    if not np.all((theta >= lo) & (theta <= hi)):
        return -math.inf
    return log_prior_constant(spec)


def log_prior_constant(spec: PriorSpec) -> float:
    zlo, zhi = spec.box()
    return float(-np.sum(np.log(zhi - zlo)))


def sample_prior(spec: PriorSpec, rng_seed, n: int | None = None) -> np.ndarray:
    """Draw ``n`` parameter vectors (or one if ``n`` is None), uniform in sampling space."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    zlo, zhi = spec.box()
    z = rng.uniform(zlo, zhi, size=(1 if n is None else n, len(PARAM_NAMES)))
    theta = from_sampling(z)
    # exp(log(x)) can land an ulp outside [lo, hi]
    theta = np.clip(theta, spec.lower(), spec.upper())
    return theta[0] if n is None else theta

"""Posterior ensembles, their forward propagation, and border-density summaries."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anatomy import Anatomy
from .growth import SeedError, SolverConfig, simulate_array
from .priors import PARAM_NAMES, Theta
from .volume_io import Volume, write_volume

log = logging.getLogger(__name__)

MAX_SKIP_FRACTION = 0.10
QUANTILES = {"q5": 5, "q25": 25, "median": 50, "q75": 75, "q95": 95}


@dataclass
class PosteriorEnsemble:
    """Samples in natural parameter units, ``(S, 11)``, with their scores."""

    thetas: np.ndarray
    loglik: np.ndarray
    logprior: np.ndarray
    provenance: dict = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        self.loglik = np.atleast_1d(np.asarray(self.loglik, dtype=np.float64))
        self.logprior = np.atleast_1d(np.asarray(self.logprior, dtype=np.float64))
        n = self.thetas.shape[0]
        if n < 1 or self.thetas.shape[1] != len(PARAM_NAMES):
            raise ValueError(f"thetas must be (S>=1, {len(PARAM_NAMES)})")
        if self.loglik.shape != (n,) or self.logprior.shape != (n,):
            raise ValueError("loglik/logprior must have one entry per sample")

    def __len__(self):
        return self.thetas.shape[0]

    def map_index(self) -> int:
        """First index of the largest ``loglik + logprior`` (ties break low)."""
        return int(np.argmax(self.loglik + self.logprior))

    def map_theta(self) -> Theta:
        return Theta.from_array(self.thetas[self.map_index()])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*PARAM_NAMES, "loglik", "logprior"])
            for row, ll, lp in zip(self.thetas, self.loglik, self.logprior):
                w.writerow([repr(float(v)) for v in (*row, ll, lp)])
        meta = {"provenance": self.provenance, "generations": self.trace}
        (directory / "generations.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory) -> "PosteriorEnsemble":
        directory = Path(directory)
        data = np.loadtxt(directory / "samples.csv", delimiter=",", skiprows=1, ndmin=2)
        k = len(PARAM_NAMES)
        meta_path = directory / "generations.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data[:, :k], data[:, k], data[:, k + 1], meta.get("provenance", {}), meta.get("generations", []))


@dataclass
class DensityMaps:
    map_u: Volume
    mean_u: Volume
    std_u: Volume
    n_prop: int
    skipped: int = 0
    mean_stability: float = float("nan")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_volume(directory / "map_u.vol", self.map_u)
        write_volume(directory / "mean_u.vol", self.mean_u)
        write_volume(directory / "std_u.vol", self.std_u)
        stats = {"n_prop": self.n_prop, "skipped": self.skipped, "mean_stability": self.mean_stability}
        (directory / "stats.json").write_text(json.dumps(stats, indent=1))


def thin_indices(n_total: int, n_prop: int) -> np.ndarray:
    """Stratified thinning: the middle of each of ``n_prop`` equal strata."""
    if not 1 <= n_prop <= n_total:
        raise ValueError(f"n_prop must lie in [1, {n_total}], got {n_prop}")
    return ((np.arange(n_prop) + 0.5) * n_total / n_prop).astype(np.int64)


def propagate(
    ensemble: PosteriorEnsemble,
    anatomy: Anatomy,
    solver: SolverConfig = SolverConfig(),
    n_prop: int = 500,
    stability_check: bool = True,
) -> DensityMaps:
    """MAP, mean and standard deviation of the tumor density over the ensemble.

    Samples whose seed falls outside the domain are skipped with a warning;
    more than 10% skipped is an error. Moments accumulate in sample order, so
    the result does not depend on how the solves are scheduled.
    ``mean_stability`` is the mean absolute difference between the mean map
    and the mean over every second propagated sample.
    """
    idx = thin_indices(len(ensemble), n_prop)
    mean = np.zeros(anatomy.meta.dims)
    m2 = np.zeros(anatomy.meta.dims)
    half = np.zeros(anatomy.meta.dims)
    n_ok = n_half = skipped = 0
    for k, i in enumerate(idx):
        try:
            u = simulate_array(anatomy, Theta.from_array(ensemble.thetas[i]).growth(), solver)
        except SeedError as exc:
            skipped += 1
            warnings.warn(f"sample {i} skipped: {exc}", RuntimeWarning, stacklevel=2)
            if skipped > MAX_SKIP_FRACTION * n_prop:
                raise RuntimeError(f"more than {MAX_SKIP_FRACTION:.0%} of forward solves failed") from exc
            continue
        # Welford update: one pass, and exactly zero spread for identical solves
        n_ok += 1
        delta = u - mean
        mean += delta / n_ok
        m2 += delta * (u - mean)
        if k % 2 == 0:
            half += u
            n_half += 1
    if n_ok == 0:
        raise RuntimeError("no forward solve succeeded")
    std = np.minimum(np.sqrt(np.maximum(m2 / n_ok, 0.0)), 0.5)
    mean = np.clip(mean, 0.0, 1.0)
    stability = float(np.mean(np.abs(mean - half / n_half))) if stability_check and n_half else float("nan")

    map_u = simulate_array(anatomy, ensemble.map_theta().growth(), solver)
    meta = anatomy.meta
    return DensityMaps(Volume(meta, map_u), Volume(meta, mean), Volume(meta, std), n_ok, skipped, stability)


def border_voxels(seg) -> np.ndarray:
    """Segmented voxels with at least one unsegmented 6-neighbour (grid edge counts as unsegmented)."""
    seg = np.asarray(seg, dtype=bool)
    padded = np.pad(seg, 1, constant_values=False)
    interior = np.ones_like(seg)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return seg & ~interior


def border_density_stats(u, seg, exclusion=None) -> dict[str, float]:
    u = np.asarray(u, dtype=np.float64)
    border = border_voxels(seg)
    if exclusion is not None:
        border &= ~np.asarray(exclusion, dtype=bool)
    if not border.any():
        raise ValueError("segmentation boundary is empty")
    vals = u[border]
    out = {"min": float(vals.min())}
    out.update({k: float(np.percentile(vals, q)) for k, q in QUANTILES.items()})
    out["max"] = float(vals.max())
    out["count"] = int(vals.size)
    return out

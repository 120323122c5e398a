"""Fisher-Kolmogorov forward model on a uniform voxel grid.

du/dt = div(D grad u) + rho u (1 - u) in the domain, zero flux on its boundary.

Diffusion is an explicit conservative finite-volume update: the conductance of
each face is the harmonic mean of the two adjacent voxel diffusivities, which
is exactly zero whenever either side lies outside the domain, so no flux ever
leaves it. Reaction is split off and advanced with the exact logistic flow,
which keeps ``u`` in [0, 1] and makes 0 and 1 fixed points. When diffusion
limits the step, the reaction is sub-cycled: it runs once per reaction time
scale rather than after every diffusion update.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from .anatomy import Anatomy, diffusivity
from .volume_io import Volume

log = logging.getLogger(__name__)

REACTION_DT_FACTOR = 0.1  # dt <= 0.1 / rho


class SeedError(ValueError):
    """The tumor seed cannot be placed on this grid/domain."""


@dataclass(frozen=True)
class GrowthParams:
    D_w: float
    rho: float
    T: float
    ic_mm: tuple[float, float, float]

    def __post_init__(self):
        vals = (self.D_w, self.rho, self.T, *self.ic_mm)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite growth parameters {vals}")
        if self.D_w <= 0 or self.rho <= 0 or self.T <= 0:
            raise ValueError("D_w, rho and T must be positive")
        object.__setattr__(self, "ic_mm", tuple(float(c) for c in self.ic_mm))


@dataclass(frozen=True)
class SolverConfig:
    cfl_safety: float = 0.9
    seed_radius_mm: float = 2.0
    seed_amplitude: float = 1.0

    def __post_init__(self):
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if not self.seed_radius_mm > 0:
            raise ValueError("seed_radius_mm must be positive")
        if not 0 < self.seed_amplitude <= 1:
            raise ValueError("seed_amplitude must lie in (0, 1]")


def face_conductances(D: np.ndarray, spacing_mm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Harmonic-mean face diffusivities divided by h^2, one array per axis.

    ``kx[i, j, k]`` couples voxels ``(i, j, k)`` and ``(i+1, j, k)``; the last
    slab along each axis is zero.
    """
    out = []
    for axis, h in enumerate(spacing_mm):
        k = np.zeros_like(D, dtype=np.float64)
        n = D.shape[axis]
        a = np.take(D, range(0, n - 1), axis=axis)
        b = np.take(D, range(1, n), axis=axis)
        denom = a + b
        with np.errstate(invalid="ignore", divide="ignore"):
            hm = np.where((a > 0) & (b > 0), 2.0 * a * b / denom, 0.0)
        idx = [slice(None)] * 3
        idx[axis] = slice(0, n - 1)
        k[tuple(idx)] = hm / (h * h)
        out.append(k)
    return tuple(out)


def stable_dt(D_field: np.ndarray, spacing_mm) -> float:
    """Explicit-Euler diffusion bound; +inf when there is no diffusion at all."""
    D = np.asarray(D_field, dtype=np.float64)
    if not np.all(np.isfinite(D)) or D.min(initial=0.0) < 0:
        raise ValueError("diffusivity must be finite and nonnegative")
    d_max = float(D.max(initial=0.0))
    if d_max == 0.0:
        return math.inf
    return 1.0 / (2.0 * d_max * sum(1.0 / (h * h) for h in spacing_mm))


def _logistic(u, rho_dt):
    e = math.exp(rho_dt)
    return u * e / (1.0 + u * (e - 1.0))


def step(
    u: np.ndarray, anatomy: Anatomy, D_field: np.ndarray, rho: float, dt: float
) -> np.ndarray:
    """One diffusion + reaction step (vectorised reference implementation)."""
    bound = stable_dt(D_field, anatomy.meta.spacing_mm)
    if dt <= 0 or dt > bound * (1 + 1e-12):
        raise ValueError(f"dt={dt} violates the stability bound {bound}")
    kx, ky, kz = face_conductances(D_field, anatomy.meta.spacing_mm)
    u = np.asarray(u, dtype=np.float64)
    flux = np.zeros_like(u)
    for axis, k in enumerate((kx, ky, kz)):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        f = k[lo] * (u[hi] - u[lo])
        flux[lo] += f
        flux[hi] -= f
    new = u + dt * flux
    if rho != 0:
        new = _logistic(new, rho * dt)
    new = np.clip(new, 0.0, 1.0)
    return np.where(anatomy.in_domain, new, 0.0)


@numba.njit(cache=True, fastmath={"reassoc"})
def _advance(a, b, kx, ky, kz, m, klo, khi, dts, factors, lo, hi):
    """Run len(dts) steps on ghost-padded arrays; returns (u_final, clamp_mass).

    Step ``s`` diffuses over ``dts[s]`` and then, when ``factors[s] != 1``,
    applies the logistic flow with growth factor ``factors[s]``. Only the box
    [lo, hi] (grown by one voxel per step) can hold nonzero values, and in
    each (i, j) row only the k-range [klo, khi] holds domain voxels, so work
    is restricted to their intersection; this is exact, not an approximation.
    """
    nx, ny, nz = a.shape[0] - 2, a.shape[1] - 2, a.shape[2] - 2
    clamp = 0.0
    for s in range(dts.shape[0]):
        dt = dts[s]
        e = factors[s]
        em1 = e - 1.0
        lo[0] = max(lo[0] - 1, 1)
        lo[1] = max(lo[1] - 1, 1)
        lo[2] = max(lo[2] - 1, 1)
        hi[0] = min(hi[0] + 1, nx)
        hi[1] = min(hi[1] + 1, ny)
        hi[2] = min(hi[2] + 1, nz)
        if e != 1.0:
            for i in range(lo[0], hi[0] + 1):
                for j in range(lo[1], hi[1] + 1):
                    for k in range(max(lo[2], klo[i, j]), min(hi[2], khi[i, j]) + 1):
                        c = a[i, j, k]
                        f = (
                            kx[i - 1, j, k] * (a[i - 1, j, k] - c)
                            + kx[i, j, k] * (a[i + 1, j, k] - c)
                            + ky[i, j - 1, k] * (a[i, j - 1, k] - c)
                            + ky[i, j, k] * (a[i, j + 1, k] - c)
                            + kz[i, j, k - 1] * (a[i, j, k - 1] - c)
                            + kz[i, j, k] * (a[i, j, k + 1] - c)
                        )
                        v = c + dt * f
                        v = v * e / (1.0 + v * em1)
                        w = min(max(v, 0.0), 1.0)
                        clamp += abs(v - w)
                        b[i, j, k] = w * m[i, j, k]
        else:
            for i in range(lo[0], hi[0] + 1):
                for j in range(lo[1], hi[1] + 1):
                    for k in range(max(lo[2], klo[i, j]), min(hi[2], khi[i, j]) + 1):
                        c = a[i, j, k]
                        f = (
                            kx[i - 1, j, k] * (a[i - 1, j, k] - c)
                            + kx[i, j, k] * (a[i + 1, j, k] - c)
                            + ky[i, j - 1, k] * (a[i, j - 1, k] - c)
                            + ky[i, j, k] * (a[i, j + 1, k] - c)
                            + kz[i, j, k - 1] * (a[i, j, k - 1] - c)
                            + kz[i, j, k] * (a[i, j, k + 1] - c)
                        )
                        v = c + dt * f
                        w = min(max(v, 0.0), 1.0)
                        clamp += abs(v - w)
                        b[i, j, k] = w * m[i, j, k]
        a, b = b, a
    return a, clamp


def seed_density(anatomy: Anatomy, ic_mm, config: SolverConfig) -> np.ndarray:
    """Truncated Gaussian seed centred at ``ic_mm``, masked to the domain."""
    meta = anatomy.meta
    idx = meta.index_of(ic_mm)
    if not meta.contains_index(idx) or not anatomy.in_domain[idx]:
        raise SeedError(f"seed {tuple(ic_mm)} mm is outside the domain")
    r = config.seed_radius_mm
    lo, hi = meta.bounds_mm()
    half = 0.5 * np.asarray(meta.spacing_mm)
    ic = np.asarray(ic_mm, dtype=np.float64)
    if np.any(ic - 2 * r < lo - half) or np.any(ic + 2 * r > hi + half):
        raise SeedError(f"grid too small for a seed of radius {r} mm at {tuple(ic_mm)}")
    x, y, z = meta.coordinates()
    d2 = (
        (x[:, None, None] - ic[0]) ** 2
        + (y[None, :, None] - ic[1]) ** 2
        + (z[None, None, :] - ic[2]) ** 2
    )
    u0 = config.seed_amplitude * np.exp(-d2 / (r * r))
    u0[d2 > (2 * r) ** 2] = 0.0
    u0[~anatomy.in_domain] = 0.0
    return u0


def time_steps(
    T: float, rho: float, dt_stable: float, cfl_safety: float
) -> tuple[np.ndarray, np.ndarray]:
    """Step schedule landing exactly on ``T``.

    Returns ``(dts, react)``: the diffusion step sizes and, per step, the
    elapsed time the reaction update covers (0 where it is skipped). When the
    diffusion bound is the tighter one, the reaction is sub-cycled so that it
    runs once per ``cfl_safety * 0.1 / rho`` days instead of every step.
    """
    dt_r = cfl_safety * REACTION_DT_FACTOR / rho
    dt_d = min(cfl_safety * dt_stable, dt_r)
    n = int(math.floor(T / dt_d))
    rest = T - n * dt_d
    if rest <= 1e-12 * T:
        rest = 0.0
    dts = np.full(n + (rest > 0), dt_d)
    if rest > 0:
        dts[-1] = rest
    every = max(int(math.floor(dt_r / dt_d * (1 + 1e-12))), 1)
    react = np.zeros_like(dts)
    marks = np.arange(every - 1, dts.size, every)
    if dts.size and (marks.size == 0 or marks[-1] != dts.size - 1):
        marks = np.append(marks, dts.size - 1)
    counts = np.diff(np.concatenate(([-1], marks)))
    react[marks] = counts * dt_d
    if rest > 0:
        react[-1] -= dt_d - rest
    return dts, react


def _pad(arr, dtype=np.float64):
    out = np.zeros(tuple(n + 2 for n in arr.shape), dtype=dtype)
    out[1:-1, 1:-1, 1:-1] = arr
    return out


def _row_extents(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded-index k-range of domain voxels per padded (i, j) row; empty rows get lo > hi."""
    nz = mask.shape[2]
    any_ = mask.any(axis=2)
    first = np.argmax(mask, axis=2)
    last = nz - 1 - np.argmax(mask[:, :, ::-1], axis=2)
    klo = np.full((mask.shape[0] + 2, mask.shape[1] + 2), nz + 1, dtype=np.int64)
    khi = np.zeros_like(klo)
    klo[1:-1, 1:-1] = np.where(any_, first + 1, nz + 1)
    khi[1:-1, 1:-1] = np.where(any_, last + 1, 0)
    return klo, khi


def evolve(
    u0: np.ndarray,
    anatomy: Anatomy,
    D_field: np.ndarray,
    rho: float,
    dts: np.ndarray,
    react: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Advance ``u0`` through a step schedule; returns (u, clamped mass).

    ``react`` defaults to reacting over every step (``react == dts``).
    """
    dts = np.asarray(dts, dtype=np.float64)
    react = dts if react is None else np.asarray(react, dtype=np.float64)
    bound = stable_dt(D_field, anatomy.meta.spacing_mm)
    if dts.size and dts.max() > bound * (1 + 1e-12):
        raise ValueError(f"step {dts.max()} violates the stability bound {bound}")
    u = np.where(anatomy.in_domain, np.asarray(u0, dtype=np.float64), 0.0)
    nz_idx = np.nonzero(u)
    if nz_idx[0].size == 0 or dts.size == 0:
        return u, 0.0
    lo = np.array([a.min() + 1 for a in nz_idx], dtype=np.int64)
    hi = np.array([a.max() + 1 for a in nz_idx], dtype=np.int64)
    kx, ky, kz = (_pad(k) for k in face_conductances(D_field, anatomy.meta.spacing_mm))
    factors = np.where(react > 0, np.exp(rho * react), 1.0)
    klo, khi = _row_extents(anatomy.in_domain)
    out, clamp = _advance(
        _pad(u), _pad(np.zeros_like(u)), kx, ky, kz,
        _pad(anatomy.in_domain.astype(np.float64)), klo, khi, dts, factors, lo, hi,
    )
    return np.ascontiguousarray(out[1:-1, 1:-1, 1:-1]), clamp


def simulate_array(
    anatomy: Anatomy, params: GrowthParams, config: SolverConfig = SolverConfig()
) -> np.ndarray:
    """Tumor density at time T as a float64 array."""
    u0 = seed_density(anatomy, params.ic_mm, config)
    D = diffusivity(anatomy, params.D_w)
    dts, react = time_steps(
        params.T, params.rho, stable_dt(D, anatomy.meta.spacing_mm), config.cfl_safety
    )
    u, clamp = evolve(u0, anatomy, D, params.rho, dts, react)
    if clamp > 0:
        log.debug("clamped mass %.3e over %d steps", clamp, dts.size)
    return u


def simulate(
    anatomy: Anatomy, params: GrowthParams, config: SolverConfig = SolverConfig()
) -> Volume:
    return Volume(anatomy.meta, simulate_array(anatomy, params, config))

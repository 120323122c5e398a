"""Glue between the forward model, the imaging likelihood and TMCMC."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import tmcmc
from .anatomy import Anatomy
from .growth import SeedError, SolverConfig, simulate_array
from .imaging import Observations, alpha
from .priors import PARAM_NAMES, PriorSpec, from_sampling, log_prior_constant, to_sampling

log = logging.getLogger(__name__)


class GliomaLikelihood:
    """``log P(data | theta)`` as a function of a sampling-space vector.

    Invalid parameter combinations and seeds outside the domain score -inf.
    Domain voxels and labels are gathered once; the per-call work is one
    forward solve plus a few vectorised reductions.
    """

    def __init__(
        self,
        anatomy: Anatomy,
        obs: Observations,
        solver: SolverConfig = SolverConfig(),
        use_fet: bool = True,
    ):
        if obs.meta.dims != anatomy.meta.dims:
            raise ValueError("observations and anatomy are on different grids")
        if use_fet and obs.fet_stencil.shape[0] == 0:
            raise ValueError("FET stencil is empty")
        self.anatomy = anatomy
        self.obs = obs
        self.solver = solver
        self.use_fet = use_fet
        self._dom = np.flatnonzero(anatomy.in_domain.ravel())
        self._y_t1 = obs.seg_t1gd.ravel()[self._dom]
        self._y_fl = obs.seg_flair.ravel()[self._dom]
        self._fet_idx = np.ravel_multi_index(tuple(obs.fet_stencil.T), anatomy.meta.dims)
        self._fet_y = obs.fet.ravel()[self._fet_idx]

    def density(self, theta) -> np.ndarray:
        from .priors import Theta

        return simulate_array(self.anatomy, Theta.from_array(theta).growth(), self.solver)

    def score(self, theta, u: np.ndarray | None = None) -> float:
        """Log-likelihood at a parameter vector (natural units)."""
        theta = np.asarray(theta, dtype=np.float64)
        p = dict(zip(PARAM_NAMES, theta))
        if not (0 < p["uc_flair"] < p["uc_t1gd"] < 1) or min(p["sigma2_alpha"], p["b"], p["sigma"]) <= 0:
            return -math.inf
        if u is None:
            try:
                u = self.density(theta)
            except (SeedError, ValueError):
                return -math.inf
        uu = u.ravel()[self._dom]
        s2 = p["sigma2_alpha"]
        total = _bernoulli(uu, self._y_t1, p["uc_t1gd"], s2) + _bernoulli(uu, self._y_fl, p["uc_flair"], s2)
        if self.use_fet:
            r = self._fet_y - u.ravel()[self._fet_idx] / p["b"]
            sig = p["sigma"]
            total += -0.5 * r.size * math.log(2 * math.pi * sig * sig) - float(r @ r) / (2 * sig * sig)
        return float(total)

    def __call__(self, z) -> float:
        return self.score(from_sampling(z))


def _bernoulli(u, y, u_c, s2) -> float:
    a = alpha(u, u_c, s2)
    return float(np.sum(np.where(y, np.log(a), np.log1p(-a))))


def make_target(prior: PriorSpec, likelihood) -> tmcmc.Target:
    zlo, zhi = prior.box()
    const = log_prior_constant(prior)

    def log_prior(z):
        return const if np.all((z >= zlo) & (z <= zhi)) else -math.inf

    def sample_prior(rng, n):
        return rng.uniform(zlo, zhi, size=(n, zlo.size))

    return tmcmc.Target(log_prior, likelihood, sample_prior)


def calibrate(
    anatomy: Anatomy,
    obs: Observations,
    prior: PriorSpec,
    config: tmcmc.TmcmcConfig,
    solver: SolverConfig = SolverConfig(),
    use_fet: bool = True,
):
    """Run TMCMC on the glioma posterior; returns ``(PosteriorEnsemble, TmcmcResult)``."""
    from .posterior import PosteriorEnsemble

    lik = GliomaLikelihood(anatomy, obs, solver, use_fet)
    result = tmcmc.run(make_target(prior, lik), config)
    thetas = from_sampling(result.samples)
    ens = PosteriorEnsemble(
        thetas,
        result.loglik,
        result.logprior,
        provenance={"rng_seed": config.rng_seed, "use_fet": use_fet, "log_evidence": result.log_evidence},
        trace=result.trace,
    )
    return ens, result


__all__ = ["GliomaLikelihood", "calibrate", "make_target", "to_sampling"]

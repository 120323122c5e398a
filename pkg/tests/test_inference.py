import math

import numpy as np
import pytest

from gliomacal.imaging import loglik_total
from gliomacal.inference import GliomaLikelihood, make_target
from gliomacal.priors import Theta, default_prior, to_sampling
from gliomacal.synthetic import SyntheticSpec, generate, phantom_anatomy


@pytest.fixture(scope="module")
def setup():
    anat = phantom_anatomy((32, 32, 32), 2.0)
    case = generate(SyntheticSpec(dims=(32, 32, 32), spacing_mm=2.0, rho=0.05, T=150.0), anat)
    return anat, case


def test_matches_imaging_module(setup):
    anat, case = setup
    lik = GliomaLikelihood(anat, case.observations)
    gt = case.gt_theta
    expected = loglik_total(case.gt_u, case.observations, gt.imaging(), anat.in_domain)
    assert lik.score(gt.to_array()) == pytest.approx(expected, rel=1e-12)
    assert lik(to_sampling(gt.to_array())) == pytest.approx(expected, rel=1e-9)
    mri = GliomaLikelihood(anat, case.observations, use_fet=False)
    assert mri.score(gt.to_array()) == pytest.approx(
        loglik_total(case.gt_u, case.observations, gt.imaging(), anat.in_domain, use_fet=False), rel=1e-12
    )


def test_invalid_points_score_minus_inf(setup):
    anat, case = setup
    lik = GliomaLikelihood(anat, case.observations)
    th = case.gt_theta.to_array()
    swapped = th.copy()
    swapped[6], swapped[7] = 0.2, 0.4
    assert lik.score(swapped) == -math.inf
    outside = th.copy()
    outside[3:6] = 0.0
    assert lik.score(outside) == -math.inf


def test_target_box(setup):
    anat, case = setup
    prior = default_prior(case.observations.seg_flair, anat.meta)
    target = make_target(prior, lambda z: 0.0)
    rng = np.random.default_rng(0)
    Z = target.sample_prior(rng, 200)
    vals = {target.log_prior(z) for z in Z}
    assert len(vals) == 1 and math.isfinite(vals.pop())
    zlo, zhi = prior.box()
    assert target.log_prior(zhi + 1e-6) == -math.inf
    assert np.all((Z >= zlo) & (Z <= zhi))

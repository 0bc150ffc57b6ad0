"""Shared session fixtures: synthetic scenarios and fitted chains.

The expensive fits are session-scoped and shared between module tests and
the acceptance suite so each is run once.
"""

import numpy as np
import pytest

from hosprates import gibbs, models, simulate
from hosprates.data import build_design, design_for, split_by_period


@pytest.fixture(scope="session")
def lc_scenario():
    """Large-group LC world: generator truth, dataset, LC and CC fits.

    Group sizes are kept large (n_h mostly > 50) so the standardization
    identities hold tightly, and fixed effects modest so rates stay inside
    the near-linear band.
    """
    cfg = simulate.GeneratorConfig(
        H=120, volume_log_median=np.log(400.0), volume_log_sd=0.5,
        patient_fraction=0.35, beta=(0.2, -0.15, 0.15),
        params=(("gamma0", -1.35), ("gamma1", -0.12),
                ("sigma2_alpha", 0.03), ("delta", 0.0)),
        seed=101)
    dataset, truth = simulate.generate(cfg)
    chain = gibbs.ChainConfig(iterations=2400, burnin=600, thin=3, seed=7, n_chains=1)
    out = {"config": cfg, "dataset": dataset, "truth": truth}
    for name in ("LC", "CC"):
        spec = models.ModelSpec.preset(name)
        bundle = build_design(dataset, spec)
        out[name] = {"spec": spec, "bundle": bundle,
                     "samples": gibbs.run_chain(spec, bundle, chain)}
    return out


@pytest.fixture(scope="session")
def confounded_scenario():
    """Small hospitals are sicker in case mix, older, and higher in effect.

    Small training groups (n_h around 10 at the low-volume end) make the
    constant-mean model shrink their effects hard toward the pooled level.
    Half the data is held out by period for the matched study.  LC is the
    generator family; CC and SLIL bracket it from below and above.
    """
    cfg = simulate.GeneratorConfig(
        H=800, volume_log_median=np.log(210.0), volume_log_sd=0.55,
        patient_fraction=0.12, beta=(0.45, 0.35, 0.3),
        params=(("gamma0", 0.35), ("gamma1", -0.38),
                ("sigma2_alpha", 0.02), ("delta", 0.0)),
        case_mix_shift=0.7, age_volume_shift=6.0, n_periods=4, seed=404)
    dataset, truth = simulate.generate(cfg)
    train, valid = split_by_period(dataset, 2)
    chain = gibbs.ChainConfig(iterations=1600, burnin=400, thin=3, seed=11, n_chains=1)
    out = {"config": cfg, "dataset": dataset, "truth": truth,
           "train": train, "valid": valid}
    for name in ("LC", "CC", "SLIL"):
        spec = models.ModelSpec.preset(name)
        bundle = build_design(train, spec)
        out[name] = {"spec": spec, "bundle": bundle,
                     "samples": gibbs.run_chain(spec, bundle, chain),
                     "valid_bundle": design_for(bundle, valid, spec)}
    return out

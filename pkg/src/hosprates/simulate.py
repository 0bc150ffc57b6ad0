"""Ground-truth generator for recovery, model-selection and calibration tests.

Draws hospitals (volumes, attributes), hospital effects from the configured
random-effects law, patient covariates, and Bernoulli outcomes from the
logistic model.  The realized effects are returned so recovery tests can
score the actual latent draw.  The default scenario has 300 hospitals with a
median of roughly 79 patients each and elevated effects at low volume.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, HospitalRecord, PatientRecord
from .models import ModelSpec
from .pg import RngStream
from .util import expit

__all__ = ["GeneratorConfig", "generate"]


@dataclass(frozen=True)
class GeneratorConfig:
    """Scenario for the forward model.

    ``params`` carries the true values the chosen families need
    (``mu_alpha`` | ``gamma0``/``gamma1`` | ``mean_curve`` callable over
    log-volume, plus ``sigma2_alpha`` and ``delta``).  ``beta`` applies to
    the covariates in order; ``beta_interaction`` to the sample-standardized
    age x log-volume column when the spec requests it.  ``case_mix_shift``
    moves continuous covariate means up as log-volume falls below its
    median, creating sicker patients at smaller hospitals.
    """

    H: int = 300
    volume_log_median: float = np.log(237.0)
    volume_log_sd: float = 1.0
    patient_fraction: float = 1.0 / 3.0
    n_h_override: int | None = None
    n_continuous: int = 2
    binary_prevalences: tuple = (0.3,)
    beta: tuple = (0.5, -0.3, 0.4)
    beta_interaction: float = 0.0
    spec: ModelSpec = field(default_factory=lambda: ModelSpec.preset("LC"))
    params: tuple = (("gamma0", -1.15), ("gamma1", -0.106), ("sigma2_alpha", 0.05),
                     ("delta", 0.0))
    mean_curve: object = None
    case_mix_shift: float = 0.0
    age_volume_shift: float = 0.0
    age_mean: float = 78.0
    age_sd: float = 8.0
    n_periods: int = 5
    seed: int = 0

    def param(self, key, default=None):
        return dict(self.params).get(key, default)


def _hospital_attributes(gen, volume, log_volume):
    h = len(volume)
    ntbr = np.abs(gen.normal(0.9, 0.3, h))
    rtbr = np.abs(gen.normal(0.25, 0.15, h))
    # procedure capability is much more common at high volume
    pci = (gen.random(h) < expit(-4.0 + 0.9 * log_volume)).astype(float)
    beds = np.maximum(1, np.round(volume / 3.0 + gen.normal(0, 5, h))).astype(int)
    return ntbr, rtbr, pci, beds


def _true_means(config, log_volume, basis_rows, attrs_std):
    if config.mean_curve is not None:
        return np.asarray([config.mean_curve(v) for v in log_volume], dtype=np.float64)
    kind = config.spec.mean.kind
    if kind == "constant":
        return np.full(len(log_volume), config.param("mu_alpha", -1.7347))
    if kind == "linear":
        return config.param("gamma0", -1.15) + config.param("gamma1", -0.106) * log_volume
    mu = basis_rows @ np.asarray(config.param("gamma_S"))
    if kind == "spline_linear":
        mu = mu + attrs_std @ np.asarray(config.param("gamma_L"))
    return mu


def generate(config: GeneratorConfig):
    """Draw one dataset; returns ``(Dataset, truth)``.

    ``truth`` is a dict with the realized ``alpha`` (one per hospital, in
    hospital order), ``beta`` (interaction coefficient appended when used),
    the per-hospital ``mu`` and ``sigma2`` of the effects law, and the true
    per-hospital mean rates ``P_h`` over each hospital's own patients.
    """
    gen = RngStream(config.seed, 0).generator

    volume = np.round(np.exp(gen.normal(config.volume_log_median,
                                        config.volume_log_sd, config.H))).astype(int)
    volume = np.maximum(volume, 1)
    log_volume = np.log1p(volume.astype(np.float64))
    if config.n_h_override is not None:
        n_h = np.full(config.H, config.n_h_override, dtype=int)
    else:
        n_h = np.maximum(1, np.round(volume * config.patient_fraction)).astype(int)

    ntbr, rtbr, pci, beds = _hospital_attributes(gen, volume, log_volume)
    hospitals = tuple(
        HospitalRecord(f"H{i:04d}", int(volume[i]),
                       {"ntbr": float(ntbr[i]), "rtbr": float(rtbr[i]),
                        "pci": float(pci[i]), "beds": int(beds[i])})
        for i in range(config.H)
    )

    basis_rows = None
    attrs_std = None
    if config.spec.uses_spline and config.mean_curve is None:
        from . import splines
        _, basis_rows = splines.build_basis(log_volume, config.spec.spline.degree,
                                            config.spec.spline.knots)
    if config.spec.mean.kind == "spline_linear" and config.mean_curve is None:
        raw = np.column_stack([ntbr, rtbr, pci])
        attrs_std = (raw - raw.mean(axis=0)) / np.where(raw.std(axis=0) > 0,
                                                        raw.std(axis=0), 1.0)

    mu = _true_means(config, log_volume, basis_rows, attrs_std)
    sigma2_alpha = config.param("sigma2_alpha", 0.05)
    delta = config.param("delta", 0.0) if config.spec.has_delta else 0.0
    sigma2 = sigma2_alpha * np.exp(delta * volume)
    alpha = mu + np.sqrt(sigma2) * gen.standard_normal(config.H)

    n_cont = config.n_continuous
    prevs = np.asarray(config.binary_prevalences, dtype=np.float64)
    d = n_cont + len(prevs)
    beta = np.asarray(config.beta, dtype=np.float64)
    if beta.shape[0] != d:
        raise ValueError(f"beta needs {d} entries for {d} covariates")

    # sicker and older case mix at small hospitals
    lv_med = float(np.median(log_volume))
    gap = np.maximum(0.0, lv_med - log_volume)
    shift = config.case_mix_shift * gap

    N = int(n_h.sum())
    hosp_of = np.repeat(np.arange(config.H), n_h)
    x = gen.standard_normal((N, n_cont)) + shift[hosp_of, None]
    xb = np.column_stack([x] + ([ (gen.random((N, len(prevs))) < prevs).astype(float) ]
                                if len(prevs) else []))
    age_center = config.age_mean + config.age_volume_shift * gap[hosp_of]
    age = np.clip(age_center + gen.normal(0.0, config.age_sd, N), 66.0, 100.0)

    linpred = alpha[hosp_of] + xb @ beta
    beta_full = beta
    if config.spec.interaction:
        inter = age * log_volume[hosp_of]
        inter_std = (inter - inter.mean()) / inter.std()
        linpred = linpred + config.beta_interaction * inter_std
        beta_full = np.append(beta, config.beta_interaction)

    y = (gen.random(N) < expit(linpred)).astype(int)
    periods = gen.integers(1, config.n_periods + 1, N)

    cov_names = [f"x{i + 1}" for i in range(d)]
    patients = []
    counter = 0
    for j in range(N):
        h = hosp_of[j]
        patients.append(PatientRecord(
            patient_id=f"P{counter:06d}", hospital_id=hospitals[h].hospital_id,
            outcome=int(y[j]), age=float(age[j]), admit_period=int(periods[j]),
            covariates=tuple(float(v) for v in xb[j]),
        ))
        counter += 1

    n_counts = np.bincount(hosp_of, minlength=config.H)
    dataset = Dataset(patients=tuple(patients), hospitals=hospitals,
                      covariate_names=tuple(cov_names),
                      n_h=n_counts.astype(np.int64), ybar=float(y.mean()),
                      cold_start_ids=tuple(hospitals[i].hospital_id
                                           for i in range(config.H)
                                           if n_counts[i] == 0))

    true_rates = expit(linpred)
    p_h = np.bincount(hosp_of, weights=true_rates, minlength=config.H) / n_counts
    truth = {
        "alpha": alpha, "beta": beta_full, "mu": mu, "sigma2": sigma2,
        "sigma2_alpha": sigma2_alpha, "delta": delta, "P_h": p_h,
        "linpred": linpred,
    }
    return dataset, truth

"""Posterior rate functionals: hospital rates, standardization, classification,
cross-tabs and predictive Bayes factors.

The three per-draw functionals share one H x N matrix of counterfactual
rates per retained draw (entry (h*, j): patient j's rate had they been
treated at hospital h*), so they are computed in a single pass:

* ``P``   mean of a hospital's own patients at their own hospital
* ``E``   mean over a hospital's own patients of their all-hospital average
* ``DS``  mean over the whole patient pool sent to one hospital
* ``IS``  (P / E) * ybar

Interaction designs recompute the age x log-volume column for the target
hospital through the stored standardization transform.  When the
S x H x N budget exceeds ``exact_cap``, the direct-standardization patient
pool is a seeded uniform subsample of 10,000 patients and the all-hospital
expectation switches to its near-linear approximation; both choices are
recorded in the report meta.
"""

import numpy as np

from .data import DesignBundle
from .gibbs import ParamState, PosteriorSamples
from .util import bernoulli_loglik, expit, log_mean_exp

__all__ = ["RateReport", "classify", "cross_classify", "direct_standardized",
           "expected_rate_E", "hospital_rate_P", "indirect_standardized",
           "is_conservation", "log_predictive_bayes_factor", "patient_rate",
           "plugin_indirect", "predictive_log_likelihood", "rate_draws",
           "summarize"]

DEFAULT_EXACT_CAP = 2e8
SUBSAMPLE_SIZE = 10_000


# ---------------------------------------------------------------------------
# single-draw operations (reference implementations; the batched engine below
# must agree with these on toy problems)

def patient_rate(state: ParamState, bundle: DesignBundle, patient: int,
                 target: int) -> float:
    """Rate of one patient had they been treated at the target hospital."""
    x = bundle.X[patient]
    if bundle.interaction_col >= 0:
        x = x.copy()
        j = bundle.interaction_col
        raw = bundle.age[patient] * bundle.log_volume[target]
        x[j] = (raw - bundle.transform.means[j]) / bundle.transform.scales[j]
    return float(expit(state.alpha[target] + x @ state.beta))


def hospital_rate_P(state: ParamState, bundle: DesignBundle, h: int) -> float:
    """Average rate of hospital h's own patients at hospital h."""
    own = np.flatnonzero(bundle.hosp_idx == h)
    if own.size == 0:
        raise ValueError(f"hospital {bundle.hospital_ids[h]} has no patients")
    return float(np.mean([patient_rate(state, bundle, j, h) for j in own]))


def expected_rate_E(state: ParamState, bundle: DesignBundle, h: int,
                    mode: str = "all", volume_weighted: bool = False,
                    approx: bool = False) -> float:
    """Expected rate of hospital h's patients at the reference level.

    ``mode='all'`` averages each patient over every hospital (optionally
    volume weighted); ``mode='hc_mean'`` substitutes the constant
    random-effect mean and requires a constant mean family.
    """
    own = np.flatnonzero(bundle.hosp_idx == h)
    if own.size == 0:
        raise ValueError(f"hospital {bundle.hospital_ids[h]} has no patients")
    if mode == "hc_mean":
        if "mu_alpha" not in state.hyper:
            raise ValueError("hc_mean expectation needs a constant mean family")
        mu = float(state.hyper["mu_alpha"])
        vals = [expit(mu + bundle.X[j] @ state.beta) for j in own]
        return float(np.mean(vals))
    if mode != "all":
        raise ValueError(f"unknown mode {mode!r}")
    weights = bundle.volume / bundle.volume.sum() if volume_weighted \
        else np.full(bundle.H, 1.0 / bundle.H)
    if approx:
        # near-linear shortcut: substitute the (weighted) average effect
        abar = float(weights @ state.alpha)
        vals = []
        for j in own:
            if bundle.interaction_col >= 0:
                jc = bundle.interaction_col
                raw = bundle.age[j] * float(weights @ bundle.log_volume)
                x = bundle.X[j].copy()
                x[jc] = (raw - bundle.transform.means[jc]) / bundle.transform.scales[jc]
            else:
                x = bundle.X[j]
            vals.append(expit(abar + x @ state.beta))
        return float(np.mean(vals))
    per_patient = [float(weights @ [patient_rate(state, bundle, j, t)
                                    for t in range(bundle.H)]) for j in own]
    return float(np.mean(per_patient))


def indirect_standardized(state: ParamState, bundle: DesignBundle, h: int,
                          **kwargs) -> float:
    """(P_h / E_h) scaled to the dataset's grand mean outcome."""
    p = hospital_rate_P(state, bundle, h)
    e = expected_rate_E(state, bundle, h, **kwargs)
    return p / e * bundle.ybar


def direct_standardized(state: ParamState, bundle: DesignBundle, h: int,
                        approx: bool = False) -> float:
    """Rate hospital h would show treating the entire patient pool."""
    if approx:
        if bundle.interaction_col >= 0:
            raise ValueError("the average-patient shortcut needs a no-interaction design")
        xbar = bundle.X.mean(axis=0)
        return float(expit(state.alpha[h] + xbar @ state.beta))
    return float(np.mean([patient_rate(state, bundle, j, h)
                          for j in range(bundle.N)]))


# ---------------------------------------------------------------------------
# batched engine over all retained draws

def _counterfactual_rates(alpha, beta, bundle, patient_cols):
    """H x len(patient_cols) matrix of rates for one draw."""
    j = bundle.interaction_col
    if j >= 0:
        keep = np.arange(bundle.d) != j
        u = bundle.X[np.ix_(patient_cols, keep)] @ beta[keep]
        base = alpha[:, None] + u[None, :]
        inter = np.outer(bundle.log_volume, bundle.age[patient_cols])
        base += beta[j] / bundle.transform.scales[j] * (inter - bundle.transform.means[j])
    else:
        u = bundle.X[patient_cols] @ beta
        base = alpha[:, None] + u[None, :]
    return expit(base)


def rate_draws(samples: PosteriorSamples, bundle: DesignBundle,
               volume_weighted: bool = False, exact_cap: float = DEFAULT_EXACT_CAP,
               subsample_seed: int = 0) -> dict:
    """Per-draw rate functionals; returns S x H arrays for P, E, IS, DS.

    ``meta`` in the result records whether the direct-standardization pool
    was subsampled and whether E used the near-linear approximation.
    """
    s, h, n = samples.S, bundle.H, bundle.N
    budget_ok = s * h * n <= exact_cap
    if budget_ok:
        ds_cols = np.arange(n)
    else:
        picker = np.random.Generator(np.random.PCG64(subsample_seed))
        ds_cols = np.sort(picker.choice(n, size=min(SUBSAMPLE_SIZE, n), replace=False))

    weights = bundle.volume / bundle.volume.sum() if volume_weighted \
        else np.full(h, 1.0 / h)
    own_cols = np.arange(n)
    p_out = np.empty((s, h))
    e_out = np.empty((s, h))
    ds_out = np.empty((s, h))
    nh = np.maximum(bundle.n_h, 1)

    for si in range(s):
        alpha = samples.alpha[si]
        beta = samples.beta[si]
        if budget_ok:
            rates = _counterfactual_rates(alpha, beta, bundle, own_cols)
            own = rates[bundle.hosp_idx, own_cols]
            colmean = weights @ rates
            ds_out[si] = rates.mean(axis=1)
        else:
            rates = _counterfactual_rates(alpha, beta, bundle, ds_cols)
            ds_out[si] = rates.mean(axis=1)
            lin = alpha[bundle.hosp_idx] + bundle.X @ beta
            own = expit(lin)
            # near-linear approximation of the all-hospital average
            abar = float(weights @ alpha)
            if bundle.interaction_col >= 0:
                j = bundle.interaction_col
                keep = np.arange(bundle.d) != j
                u = bundle.X[:, keep] @ beta[keep]
                raw = bundle.age * float(weights @ bundle.log_volume)
                u = u + beta[j] * (raw - bundle.transform.means[j]) / bundle.transform.scales[j]
            else:
                u = bundle.X @ beta
            colmean = expit(abar + u)
        p_out[si] = np.bincount(bundle.hosp_idx, weights=own, minlength=h) / nh
        e_out[si] = np.bincount(bundle.hosp_idx, weights=colmean, minlength=h) / nh

    # hospitals with no patients in this design have no indirect rate
    with np.errstate(invalid="ignore"):
        is_out = p_out / e_out * bundle.ybar
    return {"P": p_out, "E": e_out, "IS": is_out, "DS": ds_out,
            "meta": {"exact": budget_ok, "ds_pool": int(ds_cols.size),
                     "volume_weighted": volume_weighted}}


def plugin_indirect(samples: PosteriorSamples, bundle: DesignBundle,
                    volume_weighted: bool = False) -> np.ndarray:
    """Indirectly standardized rates at the posterior-mean parameters.

    Averaging the parameters before forming the ratio (rather than averaging
    per-draw ratios) is the ordering under which the hospital-mean of the
    standardized rates reproduces the grand mean outcome; per-draw ratios
    carry a positive posterior-curvature term that does not vanish with more
    draws.  This plug-in is the reported point estimate; intervals come from
    the per-draw ratios.
    """
    alpha = samples.alpha.mean(axis=0)
    beta = samples.beta.mean(axis=0)
    weights = bundle.volume / bundle.volume.sum() if volume_weighted \
        else np.full(bundle.H, 1.0 / bundle.H)
    rates_mat = _counterfactual_rates(alpha, beta, bundle, np.arange(bundle.N))
    own = rates_mat[bundle.hosp_idx, np.arange(bundle.N)]
    nh = np.maximum(bundle.n_h, 1)
    p = np.bincount(bundle.hosp_idx, weights=own, minlength=bundle.H) / nh
    e = np.bincount(bundle.hosp_idx, weights=weights @ rates_mat,
                    minlength=bundle.H) / nh
    with np.errstate(invalid="ignore"):
        return p / e * bundle.ybar


def is_conservation(samples: PosteriorSamples, bundle: DesignBundle,
                    n_batches: int = 12) -> tuple:
    """(gap, mcse): |hospital-mean plug-in IS - ybar| and the Monte Carlo
    standard error of the per-draw hospital-mean IS statistic."""
    plug = plugin_indirect(samples, bundle)
    gap = abs(float(plug.mean()) - bundle.ybar)
    draws = rate_draws(samples, bundle)
    m_s = draws["IS"].mean(axis=1)
    n = len(m_s) // n_batches * n_batches
    batch = m_s[:n].reshape(n_batches, -1).mean(axis=1)
    mcse = float(batch.std(ddof=1) / np.sqrt(n_batches))
    return gap, mcse


# ---------------------------------------------------------------------------
# posterior summaries and classification

class RateReport:
    """Per-hospital posterior summaries of the rate functionals.

    Intervals are central 95% ranges from linear-interpolation quantiles of
    the retained draws.  ``labels`` classify on the chosen functional's
    interval against the threshold.
    """

    CSV_HEADER = ("hospital_id,volume,n,raw,P_mean,P_lo,P_hi,IS_mean,IS_lo,"
                  "IS_hi,DS_mean,DS_lo,DS_hi,class").split(",")

    def __init__(self, bundle: DesignBundle, draws: dict, functional: str = "DS",
                 threshold: float = 0.15):
        if draws["P"].shape[0] == 0:
            raise ValueError("no retained draws to summarize")
        self.hospital_ids = bundle.hospital_ids
        self.volume = bundle.volume.astype(int)
        self.n_h = bundle.n_h
        self.ybar = bundle.ybar
        self.functional = functional
        self.threshold = threshold
        self.meta = dict(draws["meta"])
        raw = np.bincount(bundle.hosp_idx, weights=bundle.y, minlength=bundle.H)
        self.raw = np.divide(raw, bundle.n_h, out=np.full(bundle.H, np.nan),
                             where=bundle.n_h > 0)
        self.stats = {}
        for key in ("P", "IS", "DS"):
            arr = draws[key]
            self.stats[key] = {
                "mean": arr.mean(axis=0),
                "lo": np.quantile(arr, 0.025, axis=0),
                "hi": np.quantile(arr, 0.975, axis=0),
            }
        if "IS_plugin" in draws:
            self.stats["IS"]["mean"] = draws["IS_plugin"]
        self.labels = classify(self, threshold=threshold, functional=functional)

    def rows(self):
        for i in range(len(self.hospital_ids)):
            row = [self.hospital_ids[i], int(self.volume[i]), int(self.n_h[i]),
                   float(self.raw[i])]
            for key in ("P", "IS", "DS"):
                st = self.stats[key]
                row += [float(st["mean"][i]), float(st["lo"][i]), float(st["hi"][i])]
            row.append(self.labels[i])
            yield row


def summarize(samples: PosteriorSamples, bundle: DesignBundle,
              functional: str = "DS", threshold: float = 0.15,
              **engine_kwargs) -> RateReport:
    """Posterior mean and 95% interval per hospital for P, IS and DS.

    The reported IS point estimate is the plug-in at posterior-mean
    parameters (see :func:`plugin_indirect`); everything else is a plain
    draw average.  Intervals are 2.5%/97.5% linear-interpolation quantiles.
    """
    if functional not in ("P", "IS", "DS"):
        raise ValueError(f"unknown functional {functional!r}")
    draws = rate_draws(samples, bundle, **engine_kwargs)
    draws["IS_plugin"] = plugin_indirect(
        samples, bundle, volume_weighted=engine_kwargs.get("volume_weighted", False))
    return RateReport(bundle, draws, functional=functional, threshold=threshold)


def classify(report: RateReport, threshold: float = 0.15,
             functional: str | None = None) -> list:
    """Low / Average / High by whether the 95% interval clears the threshold."""
    st = report.stats[functional or report.functional]
    labels = []
    for lo, hi in zip(st["lo"], st["hi"]):
        if hi < threshold:
            labels.append("Low")
        elif lo > threshold:
            labels.append("High")
        else:
            labels.append("Average")
    return labels


LABELS = ("Low", "Average", "High")


def cross_classify(labels_a: dict, labels_b: dict, volumes: dict | None = None,
                   quartile: str | None = None):
    """3x3 contingency counts (and percentages) of two labelings.

    ``labels_*`` map hospital id to a label.  ``quartile`` restricts to the
    lower or upper volume quartile (quantile rule: linear interpolation).
    """
    if set(labels_a) != set(labels_b):
        raise ValueError("labelings cover different hospital sets")
    ids = sorted(labels_a)
    if quartile is not None:
        if volumes is None:
            raise ValueError("volume filter needs volumes")
        vols = np.array([volumes[i] for i in ids], dtype=float)
        if quartile == "lower":
            ids = [i for i, v in zip(ids, vols) if v <= np.quantile(vols, 0.25)]
        elif quartile == "upper":
            ids = [i for i, v in zip(ids, vols) if v >= np.quantile(vols, 0.75)]
        else:
            raise ValueError(f"unknown quartile {quartile!r}")
    counts = np.zeros((3, 3), dtype=int)
    for i in ids:
        counts[LABELS.index(labels_a[i]), LABELS.index(labels_b[i])] += 1
    total = max(counts.sum(), 1)
    return {"labels": LABELS, "counts": counts,
            "percent": 100.0 * counts / total, "total": int(counts.sum())}


# ---------------------------------------------------------------------------
# out-of-sample predictive comparison

def predictive_log_likelihood(samples: PosteriorSamples,
                              bundle_val: DesignBundle) -> float:
    """log of the draw-averaged likelihood of held-out outcomes.

    Computed stably as logmeanexp over per-draw Bernoulli log-likelihoods.
    Hospitals unseen in training are covered because every chain carries
    effects for the full hospital list (prior draws where no patients).
    """
    ll = np.empty(samples.S)
    y = bundle_val.y
    for s in range(samples.S):
        lin = samples.alpha[s][bundle_val.hosp_idx] + bundle_val.X @ samples.beta[s]
        ll[s] = bernoulli_loglik(y, lin)
    return log_mean_exp(ll)


def log_predictive_bayes_factor(samples_a: PosteriorSamples,
                                samples_b: PosteriorSamples,
                                bundle_val_a: DesignBundle,
                                bundle_val_b: DesignBundle | None = None) -> float:
    """Log ratio of posterior predictive likelihoods of two fitted models.

    Both fits must come from the identical training split (hash-checked).
    Positive values favor the first model.
    """
    if samples_a.meta["data_hash"] != samples_b.meta["data_hash"]:
        raise ValueError("fits were not trained on the identical split")
    if bundle_val_b is None:
        bundle_val_b = bundle_val_a
    return (predictive_log_likelihood(samples_a, bundle_val_a)
            - predictive_log_likelihood(samples_b, bundle_val_b))

"""Model-free matched cohort study: propensity and risk scores, k-to-1
matching under a propensity caliper with Mahalanobis distances, balance
diagnostics, and the observed-vs-predicted aggregation check.

The assignment with ``k`` controls per treated unit (without replacement)
is solved exactly as a min-cost bipartite matching with each treated unit
duplicated ``k`` times; above the admissible-edge cap a greedy
nearest-neighbor pass takes over and is labeled as such in the study.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from .data import DataError, Dataset, DesignBundle
from .gibbs import PosteriorSamples, mean_vector
from .util import expit

__all__ = ["CohortDef", "MatchedStudy", "MatchingError", "aggregation_check",
           "balance_table", "fit_propensity", "match", "risk_score"]

EDGE_CAP = 5_000_000


class MatchingError(ValueError):
    """Infeasible or ill-posed matching request."""


@dataclass(frozen=True)
class CohortDef:
    """Treated-group rule plus matching parameters.

    Exactly one of ``volume_quantile_le`` (treated = hospitals at or below
    that volume quantile) or ``hospital_ids`` (an explicit treated list)
    must be given.  Controls default to the complement; set
    ``control_quantile_ge`` to restrict them to the high-volume end.
    """

    volume_quantile_le: float | None = None
    hospital_ids: tuple = ()
    control_quantile_ge: float | None = None
    k: int = 5
    caliper_sd: float = 0.2
    exact_keys: tuple = ()

    def __post_init__(self):
        if (self.volume_quantile_le is None) == (not self.hospital_ids):
            raise ValueError("give exactly one of volume_quantile_le or hospital_ids")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def group_masks(self, dataset: Dataset):
        """(treated, control) boolean masks over the hospital list."""
        vols = np.array([h.volume for h in dataset.hospitals], dtype=float)
        if self.hospital_ids:
            ids = set(self.hospital_ids)
            treated = np.array([h.hospital_id in ids for h in dataset.hospitals])
        else:
            treated = vols <= np.quantile(vols, self.volume_quantile_le)
        control = ~treated
        if self.control_quantile_ge is not None:
            control &= vols >= np.quantile(vols, self.control_quantile_ge)
        if not treated.any() or not control.any():
            raise MatchingError("treated and control hospital groups must be nonempty")
        return treated, control


@dataclass
class MatchedStudy:
    """Pairs of (treated patient, k control patients) plus bookkeeping.

    Indices refer to the patient order of the study dataset.  ``method`` is
    ``optimal`` (min-cost assignment) or ``greedy`` (above the edge cap).
    """

    pairs: list
    treated_idx: np.ndarray
    control_idx: np.ndarray
    method: str
    k: int
    caliper: float
    dropped: list = field(default_factory=list)

    @property
    def matched_controls(self) -> np.ndarray:
        return np.array([c for _, ctrls in self.pairs for c in ctrls], dtype=int)

    @property
    def matched_treated(self) -> np.ndarray:
        return np.array([t for t, _ in self.pairs], dtype=int)


@dataclass
class PropensityModel:
    """Logistic fit of treated-group membership on patient covariates."""

    coef: np.ndarray
    names: tuple
    means: np.ndarray
    scales: np.ndarray
    converged: bool
    ridged: bool
    n_iter: int

    def logits(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.means) / self.scales
        return self.coef[0] + z @ self.coef[1:]


def _patient_features(bundle: DesignBundle):
    """Raw covariates plus age, the inputs Table-style balance reports use."""
    raw = bundle.transform.invert(bundle.X)
    cols = [i for i in range(raw.shape[1]) if i != bundle.interaction_col]
    feats = np.column_stack([raw[:, cols], bundle.age])
    names = tuple(bundle.col_names[i] for i in cols) + ("age",)
    return feats, names


def _newton_logistic(z, t, ridge=0.0, tol=1e-8, max_iter=100):
    n, p = z.shape
    x = np.column_stack([np.ones(n), z])
    coef = np.zeros(p + 1)
    for it in range(1, max_iter + 1):
        eta = x @ coef
        mu = expit(eta)
        grad = x.T @ (t - mu) - ridge * coef
        if np.linalg.norm(grad) < tol:
            return coef, True, it
        w = np.maximum(mu * (1 - mu), 1e-10)
        hess = x.T @ (x * w[:, None]) + ridge * np.eye(p + 1)
        try:
            coef = coef + np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return coef, False, it
        if not np.all(np.isfinite(coef)) or np.linalg.norm(coef) > 1e3:
            return coef, False, it
    return coef, False, max_iter


def fit_propensity(bundle: DesignBundle, cohort: CohortDef,
                   dataset: Dataset) -> PropensityModel:
    """Deterministic Newton-Raphson logistic fit of group membership.

    Diverging coefficients (perfect separation) trigger a ridge-1e-4 refit,
    flagged on the returned model.
    """
    treated_h, control_h = cohort.group_masks(dataset)
    in_study = treated_h[bundle.hosp_idx] | control_h[bundle.hosp_idx]
    t = treated_h[bundle.hosp_idx].astype(float)

    feats, names = _patient_features(bundle)
    sub = feats[in_study]
    means = sub.mean(axis=0)
    scales = np.where(sub.std(axis=0) > 0, sub.std(axis=0), 1.0)
    z = (sub - means) / scales

    coef, converged, n_iter = _newton_logistic(z, t[in_study])
    ridged = False
    # a standardized log-odds above 10 per SD is a saturation artifact
    if not converged or np.max(np.abs(coef)) > 10:
        coef, converged, n_iter = _newton_logistic(z, t[in_study], ridge=1e-4)
        ridged = True
        warnings.warn("propensity fit hit separation; refit with ridge 1e-4",
                      stacklevel=2)
    return PropensityModel(coef=coef, names=("intercept", *names), means=means,
                           scales=scales, converged=converged, ridged=ridged,
                           n_iter=n_iter)


def risk_score(samples: PosteriorSamples, bundle: DesignBundle, spec) -> np.ndarray:
    """Population-level prognostic score on the logit scale.

    Posterior-mean fixed-effect predictor plus the posterior-mean average
    effect level; no hospital-specific term, so it carries only patient
    risk information.
    """
    beta_hat = samples.beta.mean(axis=0)
    level = 0.0
    for s in range(samples.S):
        hyper = {k: (v[s] if v.ndim > 1 else float(v[s]))
                 for k, v in samples.hyper.items()}
        level += float(mean_vector(spec, bundle, hyper).mean())
    level /= samples.S
    return level + bundle.X @ beta_hat


def _pooled_sd(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(0.5 * (a.var(ddof=1) + b.var(ddof=1))))


def match(bundle: DesignBundle, dataset: Dataset, cohort: CohortDef,
          propensity_logit: np.ndarray, risk: np.ndarray,
          edge_cap: int = EDGE_CAP) -> MatchedStudy:
    """k-to-1 matching without replacement under the propensity caliper.

    Distance is Mahalanobis on (covariates, age, risk score) with the
    pooled treated+control covariance; admissibility needs the propensity
    logits within ``caliper_sd`` pooled-within-group SDs and equality on
    any exact keys.
    """
    treated_h, control_h = cohort.group_masks(dataset)
    t_idx = np.flatnonzero(treated_h[bundle.hosp_idx])
    c_idx = np.flatnonzero(control_h[bundle.hosp_idx])
    if t_idx.size == 0 or c_idx.size == 0:
        raise MatchingError("no treated or no control patients in the study data")

    k = cohort.k
    if k * t_idx.size > c_idx.size:
        k = c_idx.size // t_idx.size
        if k < 1:
            raise MatchingError("fewer controls than treated units")
        warnings.warn(f"control pool supports only {k} controls per treated unit; "
                      f"reducing k from {cohort.k}", stacklevel=2)

    feats, names = _patient_features(bundle)
    mat = np.column_stack([feats, risk])
    pool = np.concatenate([t_idx, c_idx])
    cov = np.cov(mat[pool], rowvar=False)
    cov = np.atleast_2d(cov)
    if np.linalg.cond(cov) > 1e10:
        cov = cov + 1e-8 * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
    prec = np.linalg.inv(cov)

    sd_logit = _pooled_sd(propensity_logit[t_idx], propensity_logit[c_idx])
    caliper = cohort.caliper_sd * sd_logit

    exact_cols = []
    for key in cohort.exact_keys:
        if key not in names:
            raise MatchingError(f"exact key {key!r} is not a patient feature")
        exact_cols.append(names.index(key))

    diff_logit = np.abs(propensity_logit[t_idx][:, None]
                        - propensity_logit[c_idx][None, :])
    admissible = diff_logit <= caliper
    for col in exact_cols:
        admissible &= feats[t_idx][:, col][:, None] == feats[c_idx][:, col][None, :]

    counts = admissible.sum(axis=1)
    if not np.any(counts >= k):
        lacking = {dataset.patients[t_idx[i]].patient_id: int(counts[i])
                   for i in np.flatnonzero(counts < k)[:20]}
        raise MatchingError(
            "caliper too tight; admissible controls per treated unit: "
            + ", ".join(f"{pid}={n}" for pid, n in sorted(lacking.items())))

    # treated units without k admissible controls are dropped with a reason
    dropped = [(int(t_idx[i]), f"only {int(counts[i])} admissible controls")
               for i in np.flatnonzero(counts < k)]
    keep = np.flatnonzero(counts >= k)
    if dropped:
        warnings.warn(f"dropping {len(dropped)} treated units with fewer than "
                      f"{k} admissible controls", stacklevel=2)

    pm = mat @ prec
    q = np.einsum("ij,ij->i", mat, pm)
    dist2 = q[t_idx][:, None] + q[c_idx][None, :] - 2.0 * (pm[t_idx] @ mat[c_idx].T)
    dist = np.sqrt(np.maximum(dist2, 0.0))

    n_edges = int(admissible.sum()) * k
    if n_edges <= edge_cap:
        pairs, extra_dropped = _optimal_assignment(dist, admissible, keep, counts,
                                                   t_idx, c_idx, k)
        dropped += extra_dropped
        method = "optimal"
    else:
        taken = np.zeros(c_idx.size, dtype=bool)
        assign = {i: [] for i in keep}
        order = keep[np.argsort(propensity_logit[t_idx[keep]])[::-1]]
        for _ in range(k):
            for i in order:
                cand = np.flatnonzero(admissible[i] & ~taken)
                if cand.size == 0:
                    continue
                best = cand[np.argmin(dist[i, cand])]
                taken[best] = True
                assign[i].append(int(c_idx[best]))
        pairs = []
        for i in keep:
            if len(assign[i]) == k:
                pairs.append((int(t_idx[i]), tuple(sorted(assign[i]))))
            else:
                dropped.append((int(t_idx[i]), "exhausted admissible controls"))
        method = "greedy"

    if not pairs:
        raise MatchingError("caliper too tight; no treated unit could be matched")
    return MatchedStudy(pairs=pairs, treated_idx=t_idx, control_idx=c_idx,
                        method=method, k=k, caliper=float(caliper), dropped=dropped)


def _optimal_assignment(dist, admissible, keep, counts, t_idx, c_idx, k):
    """Min-cost assignment with treated rows duplicated k times.

    If the remaining instance still has no full matching (shared scarce
    controls), the treated unit with the fewest admissible controls is
    dropped and the solve retried.
    """
    keep = list(keep)
    dropped = []
    while keep:
        rows, cols, costs = [], [], []
        for pos, i in enumerate(keep):
            sel = np.flatnonzero(admissible[i])
            for rep in range(k):
                rows.extend([pos * k + rep] * sel.size)
                cols.extend(sel)
                costs.extend(dist[i, sel] + 1.0)  # zero cost would mean no edge
        graph = csr_matrix((costs, (rows, cols)),
                           shape=(len(keep) * k, c_idx.size))
        try:
            row_ind, col_ind = min_weight_full_bipartite_matching(graph)
        except ValueError:
            worst = min(keep, key=lambda i: counts[i])
            keep.remove(worst)
            dropped.append((int(t_idx[worst]),
                            "no full matching under the caliper"))
            continue
        assign = {i: [] for i in keep}
        for r, c in zip(row_ind, col_ind):
            assign[keep[r // k]].append(int(c_idx[c]))
        pairs = [(int(t_idx[i]), tuple(sorted(assign[i]))) for i in keep]
        if dropped:
            warnings.warn(f"dropped {len(dropped)} treated units to restore "
                          "matching feasibility", stacklevel=3)
        return pairs, dropped
    return [], dropped


def balance_table(study: MatchedStudy, bundle: DesignBundle,
                  propensity_logit: np.ndarray, risk: np.ndarray) -> dict:
    """Covariate means and standardized differences before/after matching.

    The denominator is the equal-weight pooled SD of all treated versus all
    controls (computed once, before matching).  Degenerate covariates (zero
    pooled SD) are listed and get NaN differences.
    """
    feats, names = _patient_features(bundle)
    table_cols = np.column_stack([feats, propensity_logit, risk])
    col_names = names + ("logit_propensity", "logit_risk")

    t_all = study.treated_idx
    c_all = study.control_idx
    t_matched = study.matched_treated
    c_matched = study.matched_controls

    rows = []
    degenerate = []
    for j, name in enumerate(col_names):
        col = table_cols[:, j]
        sd = _pooled_sd(col[t_all], col[c_all])
        mt = float(col[t_matched].mean())
        mc_matched = float(col[c_matched].mean())
        mc_all = float(col[c_all].mean())
        if sd == 0:
            degenerate.append(name)
            before = after = float("nan")
        else:
            before = (float(col[t_all].mean()) - mc_all) / sd
            after = (mt - mc_matched) / sd
        rows.append({"covariate": name, "treated_mean": mt,
                     "matched_control_mean": mc_matched, "all_control_mean": mc_all,
                     "std_diff_before": before, "std_diff_after": after})
    return {"rows": rows, "degenerate": degenerate}


def aggregation_check(study: MatchedStudy, bundle: DesignBundle,
                      fits: list) -> dict:
    """Observed vs model-aggregated mortality for the matched groups.

    ``fits`` is a list of (name, PosteriorSamples) or
    (name, PosteriorSamples, DesignBundle) when a model needs its own
    validation design (same dataset, same patient order).  Predictions are
    posterior-mean rates at each patient's actual hospital, averaged over
    the group.  Columns: treated, matched controls, all controls.
    """
    groups = {
        "treated": study.matched_treated,
        "matched_controls": study.matched_controls,
        "all_controls": study.control_idx,
    }
    out = {"columns": list(groups), "rows": []}
    y = bundle.y
    out["rows"].append({"model": "observed",
                        **{g: float(y[idx].mean()) for g, idx in groups.items()}})
    for entry in fits:
        name, samples = entry[0], entry[1]
        b = entry[2] if len(entry) > 2 else bundle
        if b.patient_ids != bundle.patient_ids:
            raise MatchingError(f"fit {name!r} was built on different patients")
        pred = np.zeros(b.N)
        for s in range(samples.S):
            lin = samples.alpha[s][b.hosp_idx] + b.X @ samples.beta[s]
            pred += expit(lin)
        pred /= samples.S
        out["rows"].append({"model": name,
                            **{g: float(pred[idx].mean()) for g, idx in groups.items()}})
    return out

import numpy as np
import pytest
from helpers import brute_force_assignment, toy_dataset

from hosprates import matching
from hosprates.data import build_design
from hosprates.models import ModelSpec
from hosprates.util import logit


def study_bundle(n_treated_hosp=2, n_control_hosp=3, per=30, seed=0, shift=0.0):
    """Validation-style dataset with small (treated) and large hospitals."""
    n_h = tuple([per] * (n_treated_hosp + n_control_hosp))
    vols = tuple([5 + i for i in range(n_treated_hosp)]
                 + [500 + 10 * i for i in range(n_control_hosp)])
    ds = toy_dataset(n_per=n_h, volumes=vols, seed=seed)
    if shift:
        # make treated patients sicker on x1
        patients = []
        for p in ds.patients:
            if int(p.hospital_id[1:]) < n_treated_hosp:
                covs = (p.covariates[0] + shift, *p.covariates[1:])
                patients.append(p._replace_cov(covs) if hasattr(p, "_replace_cov")
                                else type(p)(p.patient_id, p.hospital_id, p.outcome,
                                             p.age, p.admit_period, covs))
            else:
                patients.append(p)
        ds = type(ds)(patients=tuple(patients), hospitals=ds.hospitals,
                      covariate_names=ds.covariate_names, n_h=ds.n_h,
                      ybar=ds.ybar, cold_start_ids=ds.cold_start_ids)
    bundle = build_design(ds, ModelSpec.preset("CC"))
    return ds, bundle


COHORT = matching.CohortDef(volume_quantile_le=0.3, k=1, caliper_sd=1000.0)


def test_cohort_rules():
    ds, _ = study_bundle()
    treated, control = COHORT.group_masks(ds)
    assert treated.sum() == 2 and control.sum() == 3
    byid = matching.CohortDef(hospital_ids=("H0", "H3"), k=2)
    t2, c2 = byid.group_masks(ds)
    assert t2.tolist() == [True, False, False, True, False]
    with pytest.raises(ValueError):
        matching.CohortDef()
    with pytest.raises(ValueError):
        matching.CohortDef(volume_quantile_le=0.2, hospital_ids=("H1",))
    with pytest.raises(ValueError):
        matching.CohortDef(volume_quantile_le=0.2, k=0)


def test_propensity_balanced_groups_zero_coefficients():
    # mirror the treated covariate rows into the control group: exact balance
    gen = np.random.default_rng(1)
    x_t = gen.normal(size=(120, 3))
    x_c = np.vstack([x_t, x_t])  # two copies per treated row
    z = np.vstack([x_t, x_c])
    t = np.concatenate([np.ones(120), np.zeros(240)])
    coef, converged, _ = matching._newton_logistic(z - z.mean(axis=0), t)
    assert converged
    assert np.all(np.abs(coef[1:]) < 1e-6)
    assert coef[0] == pytest.approx(logit(1 / 3), abs=1e-6)


def test_propensity_two_by_two_log_odds():
    # one binary covariate; the slope is the log odds ratio
    t1, t0, c1, c0 = 30, 10, 20, 40  # treated/control counts at x=1 and x=0
    z = np.concatenate([np.ones(t1), np.zeros(t0), np.ones(c1), np.zeros(c0)])
    t = np.concatenate([np.ones(t1 + t0), np.zeros(c1 + c0)])
    coef, converged, _ = matching._newton_logistic(z[:, None], t)
    assert converged
    expected = np.log(t1 * c0 / (t0 * c1))
    assert coef[1] == pytest.approx(expected, abs=1e-8)


def test_propensity_separation_falls_back_to_ridge():
    z = np.linspace(-1, 1, 40)[:, None]
    t = (z[:, 0] > 0).astype(float)
    with pytest.warns(UserWarning, match="separation"):
        ds, bundle = study_bundle(seed=3)
        # route through the public API with a separable feature
        cohort = matching.CohortDef(volume_quantile_le=0.3, k=1)
        treated_h, _ = cohort.group_masks(ds)
        is_treated = treated_h[bundle.hosp_idx].astype(float)
        sep = np.where(is_treated > 0, 1.0, -1.0)
        bundle.X[:, 0] = sep  # perfectly separating covariate
        model = matching.fit_propensity(bundle, cohort, ds)
    assert model.ridged


def test_risk_score_constant_when_beta_zero(lc_scenario):
    fit = lc_scenario["CC"]
    samples = fit["samples"]
    zeroed = type(samples)(alpha=samples.alpha, beta=np.zeros_like(samples.beta),
                           hyper=samples.hyper, meta=samples.meta)
    score = matching.risk_score(zeroed, fit["bundle"], fit["spec"])
    assert np.allclose(score, score[0])


def test_risk_score_monotone_and_hand_value(lc_scenario):
    fit = lc_scenario["CC"]
    samples, bundle, spec = fit["samples"], fit["bundle"], fit["spec"]
    score = matching.risk_score(samples, bundle, spec)
    beta_hat = samples.beta.mean(axis=0)
    base = score - bundle.X @ beta_hat
    assert np.allclose(base, base[0], atol=1e-10)  # common population level
    j = int(np.argmax(np.abs(beta_hat)))
    # raising a positively weighted covariate raises the score
    bumped = bundle.X.copy()
    bumped[:, j] += 1.0
    delta = (bumped @ beta_hat) - (bundle.X @ beta_hat)
    assert np.all(np.sign(delta) == np.sign(beta_hat[j]))
    # hand value for patient 0
    assert score[0] == pytest.approx(base[0] + bundle.X[0] @ beta_hat, abs=1e-12)


def test_match_picks_nearest_admissible():
    ds, bundle = study_bundle(n_treated_hosp=1, n_control_hosp=1, per=3, seed=5)
    cohort = matching.CohortDef(volume_quantile_le=0.4, k=1, caliper_sd=1e6)
    logits = np.zeros(bundle.N)
    risk = np.array([0.0, 10.0, 20.0, 0.5, 2.0, 30.0])
    study = matching.match(bundle, ds, cohort, logits, risk)
    assert study.method == "optimal"
    got = {t: c for t, c in study.pairs}
    # treated risks (0, 10, 20) pick controls at (0.5, 2.0, 30.0) optimally
    total = sum(abs(risk[t] - risk[c[0]]) for t, c in study.pairs)
    # optimal assignment pairs 0->0.5, 10->2.0, 20->30
    assert set(got) == {0, 1, 2}
    assert sorted(c[0] for c in got.values()) == [3, 4, 5]


def test_match_zero_caliper_infeasible():
    ds, bundle = study_bundle(per=4, seed=6)
    cohort = matching.CohortDef(volume_quantile_le=0.3, k=1, caliper_sd=0.0)
    gen = np.random.default_rng(2)
    logits = gen.normal(size=bundle.N)  # no exact ties
    risk = gen.normal(size=bundle.N)
    with pytest.raises(matching.MatchingError, match="admissible"):
        matching.match(bundle, ds, cohort, logits, risk)


def test_match_without_replacement_and_caliper_respected():
    ds, bundle = study_bundle(n_control_hosp=6, per=20, seed=7)
    cohort = matching.CohortDef(volume_quantile_le=0.25, k=2, caliper_sd=1.2)
    gen = np.random.default_rng(3)
    logits = gen.normal(size=bundle.N) * 0.3
    risk = gen.normal(size=bundle.N)
    study = matching.match(bundle, ds, cohort, logits, risk)
    used = study.matched_controls
    assert len(used) == len(set(used.tolist()))
    for t, ctrls in study.pairs:
        for c in ctrls:
            assert abs(logits[t] - logits[c]) <= study.caliper + 1e-12


def test_match_reduces_k_when_pool_small():
    ds, bundle = study_bundle(n_treated_hosp=1, n_control_hosp=2, per=6, seed=8)
    cohort = matching.CohortDef(volume_quantile_le=0.25, k=5, caliper_sd=1e6)
    logits = np.zeros(bundle.N)
    risk = np.arange(bundle.N, dtype=float)
    with pytest.warns(UserWarning, match="reducing k"):
        study = matching.match(bundle, ds, cohort, logits, risk)
    assert study.k == 2
    assert all(len(c) == 2 for _, c in study.pairs)


def test_optimal_matches_brute_force_small_instances():
    gen = np.random.default_rng(11)
    for trial in range(40):
        t = int(gen.integers(1, 7))
        c = int(gen.integers(t, 13))
        k = int(gen.integers(1, 3))
        if k * t > c:
            k = max(1, c // t)
        dist = gen.uniform(0.1, 5.0, size=(t, c))
        admissible = gen.random((t, c)) < 0.8
        admissible[np.arange(t) % t, gen.integers(0, c, t)] = True
        if np.any(admissible.sum(axis=1) < k):
            continue
        oracle = brute_force_assignment(dist, admissible, k)
        if oracle is None:
            continue
        got = _run_assignment(dist, admissible, k)
        if got is None:
            continue
        assert got == pytest.approx(oracle, abs=1e-9), f"trial {trial}"


def _run_assignment(dist, admissible, k):
    """Drive the production assignment on a raw distance matrix."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import min_weight_full_bipartite_matching
    t, c = dist.shape
    rows, cols, costs = [], [], []
    for i in range(t):
        sel = np.flatnonzero(admissible[i])
        for rep in range(k):
            rows.extend([i * k + rep] * sel.size)
            cols.extend(sel)
            costs.extend(dist[i, sel] + 1.0)
    graph = csr_matrix((costs, (rows, cols)), shape=(t * k, c))
    try:
        row_ind, col_ind = min_weight_full_bipartite_matching(graph)
    except ValueError:
        return None
    return float(sum(dist[r // k, cc] for r, cc in zip(row_ind, col_ind)))


def test_balance_table_standardized_difference():
    # two-point groups engineered to give pooled SD 8.25 and diff 0.80
    d = 8.25 / np.sqrt(2)
    ds, bundle = study_bundle(n_treated_hosp=1, n_control_hosp=1, per=2, seed=9)
    ages = np.array([84.3 - d, 84.3 + d, 77.7 - d, 77.7 + d])
    bundle.age[:] = ages
    study = matching.MatchedStudy(
        pairs=[(0, (2,)), (1, (3,))], treated_idx=np.array([0, 1]),
        control_idx=np.array([2, 3]), method="optimal", k=1, caliper=1.0)
    table = matching.balance_table(study, bundle, np.zeros(4), np.zeros(4))
    age_row = next(r for r in table["rows"] if r["covariate"] == "age")
    assert age_row["std_diff_before"] == pytest.approx((84.3 - 77.7) / 8.25, abs=1e-12)
    assert age_row["std_diff_before"] == pytest.approx(0.80, abs=1e-12)


def test_balance_identical_groups_zero():
    ds, bundle = study_bundle(n_treated_hosp=1, n_control_hosp=1, per=10, seed=10)
    # controls copy the treated rows exactly
    bundle.X[10:20] = bundle.X[0:10]
    bundle.age[10:20] = bundle.age[0:10]
    study = matching.MatchedStudy(
        pairs=[(i, (i + 10,)) for i in range(10)],
        treated_idx=np.arange(10), control_idx=np.arange(10, 20),
        method="optimal", k=1, caliper=1.0)
    table = matching.balance_table(study, bundle, np.zeros(20), np.zeros(20))
    for row in table["rows"]:
        if row["covariate"] in table["degenerate"]:
            continue
        assert row["std_diff_before"] == pytest.approx(0.0, abs=1e-12)
        assert row["std_diff_after"] == pytest.approx(0.0, abs=1e-12)


def test_aggregation_check_rows(lc_scenario):
    fit = lc_scenario["LC"]
    bundle = fit["bundle"]
    study = matching.MatchedStudy(
        pairs=[(0, (5, 6)), (1, (7, 8))], treated_idx=np.array([0, 1]),
        control_idx=np.arange(5, 30), method="optimal", k=2, caliper=1.0)
    table = matching.aggregation_check(study, bundle,
                                       [("m1", fit["samples"]),
                                        ("m2", fit["samples"])])
    assert [r["model"] for r in table["rows"]] == ["observed", "m1", "m2"]
    assert table["rows"][1] == table["rows"][2] | {"model": "m1"} \
        or table["rows"][1]["treated"] == table["rows"][2]["treated"]
    for row in table["rows"][1:]:
        for g in table["columns"]:
            assert 0 <= row[g] <= 1

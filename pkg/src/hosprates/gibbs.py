"""Blocked Gibbs sampler for the hierarchical random-effects logit models.

One sweep updates, in order: the Pólya-Gamma latents, the hospital effects,
the fixed effects, and the hyperparameter blocks.  All Gaussian conditionals
are solved in precision form through Cholesky factorizations; the spline
penalty enters as a precision and is never inverted.  The effect-scale
variance is drawn jointly with the mean coefficients (coefficients
marginalized out first), which is an exact blocked draw of the pair and
mixes better than the one-at-a-time update.  The log-linear variance slope
gets an adaptive random-walk Metropolis step, frozen after burn-in.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import pg
from .data import DesignBundle, build_design
from .models import ModelSpec

__all__ = ["ChainConfig", "NumericalError", "ParamState", "PosteriorSamples",
           "initial_state", "load_samples", "mean_vector", "pool_samples",
           "run_chain", "run_chains", "save_samples", "update_alpha",
           "update_beta", "update_hyper", "update_omega", "variance_vector"]


class NumericalError(RuntimeError):
    """Non-finite state or a failed factorization during sampling."""


@dataclass
class ChainConfig:
    iterations: int = 6000
    burnin: int = 1000
    thin: int = 5
    seed: int = 0
    n_chains: int = 4
    delta_step: float = 0.1

    def __post_init__(self):
        if self.burnin >= self.iterations:
            raise ValueError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")


@dataclass
class ParamState:
    """One draw of (hospital effects, fixed effects, hyperparameters)."""

    alpha: np.ndarray
    beta: np.ndarray
    hyper: dict
    omega: np.ndarray | None = None


@dataclass
class PosteriorSamples:
    """Retained draws from one chain (or several pooled chains)."""

    alpha: np.ndarray   # (S, H)
    beta: np.ndarray    # (S, p)
    hyper: dict         # name -> (S,) or (S, k)
    meta: dict

    @property
    def S(self) -> int:
        return self.alpha.shape[0]

    def state(self, s: int) -> ParamState:
        hyper = {k: (v[s].copy() if v.ndim > 1 else float(v[s]))
                 for k, v in self.hyper.items()}
        return ParamState(alpha=self.alpha[s].copy(), beta=self.beta[s].copy(),
                          hyper=hyper)


def pool_samples(chains) -> PosteriorSamples:
    """Concatenate retained draws from several chains of one model."""
    if not chains:
        raise ValueError("no chains to pool")
    meta = dict(chains[0].meta)
    meta["n_chains"] = len(chains)
    meta["stream_ids"] = [c.meta["stream_id"] for c in chains]
    meta["delta_acceptance"] = [c.meta["delta_acceptance"] for c in chains]
    hyper = {k: np.concatenate([c.hyper[k] for c in chains]) for k in chains[0].hyper}
    return PosteriorSamples(
        alpha=np.concatenate([c.alpha for c in chains]),
        beta=np.concatenate([c.beta for c in chains]),
        hyper=hyper, meta=meta)


# ---------------------------------------------------------------------------
# mean/variance structure of the random-effects law

def _mean_design(spec: ModelSpec, bundle: DesignBundle):
    """Design W for the effect means plus per-block prior precisions.

    Returns ``(W, blocks)`` where each block is
    ``(hyper_key, slice, prior_precision_template, g_key)``.
    """
    kind = spec.mean.kind
    h = bundle.H
    if kind == "constant":
        return np.ones((h, 1)), [("mu_alpha", slice(0, 1), np.eye(1), "g")]
    if kind == "linear":
        w = np.column_stack([np.ones(h), bundle.log_volume])
        return w, [("gamma", slice(0, 2), np.eye(2), "g")]
    k = bundle.basis.k
    if kind == "spline":
        return bundle.basis_rows, [("gamma_S", slice(0, k), bundle.penalty.matrix, "g_S")]
    r = bundle.attr_matrix.shape[1]
    w = np.column_stack([bundle.basis_rows, bundle.attr_matrix])
    return w, [("gamma_S", slice(0, k), bundle.penalty.matrix, "g_S"),
               ("gamma_L", slice(k, k + r), np.eye(r), "g_L")]


def _theta_vector(spec: ModelSpec, hyper: dict) -> np.ndarray:
    kind = spec.mean.kind
    if kind == "constant":
        return np.array([hyper["mu_alpha"]])
    if kind == "linear":
        return np.array([hyper["gamma0"], hyper["gamma1"]])
    if kind == "spline":
        return np.asarray(hyper["gamma_S"], dtype=np.float64)
    return np.concatenate([hyper["gamma_S"], hyper["gamma_L"]])


def _store_theta(spec: ModelSpec, hyper: dict, theta: np.ndarray):
    kind = spec.mean.kind
    if kind == "constant":
        hyper["mu_alpha"] = float(theta[0])
    elif kind == "linear":
        hyper["gamma0"], hyper["gamma1"] = float(theta[0]), float(theta[1])
    elif kind == "spline":
        hyper["gamma_S"] = theta.copy()
    else:
        k = len(hyper["gamma_S"])
        hyper["gamma_S"] = theta[:k].copy()
        hyper["gamma_L"] = theta[k:].copy()


def mean_vector(spec: ModelSpec, bundle: DesignBundle, hyper: dict) -> np.ndarray:
    """Per-hospital mean of the effects law under the current draw."""
    w, _ = _mean_design(spec, bundle)
    return w @ _theta_vector(spec, hyper)


def variance_vector(spec: ModelSpec, bundle: DesignBundle, hyper: dict) -> np.ndarray:
    """Per-hospital variance of the effects law under the current draw."""
    s2 = float(hyper["sigma2_alpha"])
    if not spec.has_delta:
        return np.full(bundle.H, s2)
    t = np.clip(hyper["delta"] * bundle.volume, -700.0, 700.0)
    return s2 * np.exp(t)


# ---------------------------------------------------------------------------
# conditional updates

def update_omega(state: ParamState, bundle: DesignBundle, rng: pg.RngStream):
    """Draw the PG(1, linear predictor) latent for every patient."""
    c = state.alpha[bundle.hosp_idx] + bundle.X @ state.beta
    return pg.sample_pg1_many(c, rng)


def update_alpha(state: ParamState, bundle: DesignBundle, spec: ModelSpec,
                 rng: pg.RngStream):
    """Conjugate normal draw of every hospital effect.

    Hospitals without patients in this design fall back to a draw from the
    current effects law (the cold-start path).
    """
    omega = state.omega
    mu = mean_vector(spec, bundle, state.hyper)
    s2 = variance_vector(spec, bundle, state.hyper)
    sw = np.bincount(bundle.hosp_idx, weights=omega, minlength=bundle.H)
    sxb = np.bincount(bundle.hosp_idx, weights=omega * (bundle.X @ state.beta),
                      minlength=bundle.H)
    prec = 1.0 / s2 + sw
    if np.any(prec <= 0):
        raise NumericalError("nonpositive posterior precision for an effect")
    v = 1.0 / prec
    m = v * (mu / s2 + bundle.sum_y_minus_half() - sxb)
    return m + np.sqrt(v) * rng.generator.standard_normal(bundle.H)


def update_beta(state: ParamState, bundle: DesignBundle, spec: ModelSpec,
                rng: pg.RngStream):
    """Conjugate normal draw of the fixed effects."""
    omega = state.omega
    s2b = float(state.hyper["sigma2_beta"])
    x = bundle.X
    a = x.T @ (x * omega[:, None]) + np.eye(bundle.d) / s2b
    b = x.T @ (bundle.y - 0.5 - omega * state.alpha[bundle.hosp_idx])
    try:
        chol = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular fixed-effect precision (collinear design)") from exc
    m = cho_solve(chol, b)
    z = rng.generator.standard_normal(bundle.d)
    return m + solve_triangular(chol[0], z, lower=True, trans="T")


def _delta_logpost(delta, resid, volume, sigma2_alpha, g_delta):
    t = np.clip(delta * volume, -700.0, 700.0)
    return (-0.5 * np.sum(t)
            - 0.5 * np.sum(resid * resid * np.exp(-t)) / sigma2_alpha
            - delta * delta / (2.0 * g_delta * sigma2_alpha))


def _draw_ig(gen, shape, scale):
    return scale / gen.gamma(shape)


def update_hyper(state: ParamState, bundle: DesignBundle, spec: ModelSpec,
                 rng: pg.RngStream, delta_step: float = 0.1):
    """Draw the hyperparameter blocks conditioned on the current effects.

    Returns ``(hyper, delta_accepted)`` where the flag is None for constant
    variance families.  The effect-scale variance and the mean coefficients
    are drawn as one block: first the variance from its conditional with the
    coefficients marginalized out (a Woodbury quadratic form), then the
    coefficients from their Gaussian conditional.
    """
    gen = rng.generator
    hyper = dict(state.hyper)
    alpha = state.alpha
    w, blocks = _mean_design(spec, bundle)
    has_delta = spec.has_delta
    delta = float(hyper.get("delta", 0.0))

    e_inv = np.exp(-np.clip(delta * bundle.volume, -700.0, 700.0)) if has_delta \
        else np.ones(bundle.H)

    # prior precision of the stacked coefficients, divided by its g scale
    m_dim = w.shape[1]
    q_scaled = np.zeros((m_dim, m_dim))
    for _, sl, q_block, g_key in blocks:
        q_scaled[sl, sl] = q_block / float(hyper[g_key])

    wt_a = w.T @ (e_inv * alpha)
    c_mat = q_scaled + w.T @ (e_inv[:, None] * w)
    try:
        chol = cho_factor(c_mat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular coefficient precision") from exc
    sol = cho_solve(chol, wt_a)

    # (i) effect-scale variance, coefficients collapsed
    a0, b0 = spec.prior("sigma2_alpha")
    quad = float(alpha @ (e_inv * alpha) - wt_a @ sol)
    shape = a0 + 0.5 * (bundle.H + (1 if has_delta else 0))
    scale = b0 + 0.5 * max(quad, 0.0)
    if has_delta:
        scale += delta * delta / (2.0 * float(hyper["g_delta"]))
    s2a = _draw_ig(gen, shape, scale)
    hyper["sigma2_alpha"] = float(s2a)

    # (ii) mean coefficients given the fresh variance
    z = gen.standard_normal(m_dim)
    theta = sol + np.sqrt(s2a) * solve_triangular(chol[0], z, lower=True, trans="T")
    _store_theta(spec, hyper, theta)

    # (iii) coefficient-scale hypers
    for _, sl, q_block, g_key in blocks:
        ag, bg = spec.prior(g_key)
        th = theta[sl]
        hyper[g_key] = float(_draw_ig(gen, ag + 0.5 * (sl.stop - sl.start),
                                      bg + float(th @ q_block @ th) / (2.0 * s2a)))
    if has_delta:
        ag, bg = spec.prior("g_delta")
        hyper["g_delta"] = float(_draw_ig(gen, ag + 0.5,
                                          bg + delta * delta / (2.0 * s2a)))

    # (iv) fixed-effect scale
    ab, bb = spec.prior("sigma2_beta")
    beta = state.beta
    hyper["sigma2_beta"] = float(_draw_ig(gen, ab + 0.5 * beta.size,
                                          bb + 0.5 * float(beta @ beta)))

    # (v) variance slope by random-walk Metropolis
    accepted = None
    if has_delta:
        resid = alpha - w @ theta
        cur = _delta_logpost(delta, resid, bundle.volume, s2a, hyper["g_delta"])
        prop = delta + delta_step * gen.standard_normal()
        new = _delta_logpost(prop, resid, bundle.volume, s2a, hyper["g_delta"])
        accepted = np.log(gen.random()) < new - cur
        hyper["delta"] = float(prop) if accepted else delta

    return hyper, accepted


def initial_state(spec: ModelSpec, bundle: DesignBundle, base_rate=None) -> ParamState:
    """Deterministic starting point: empirical logits and unit scales."""
    ybar = bundle.ybar if base_rate is None else base_rate
    ybar = min(max(ybar, 1e-3), 1 - 1e-3)
    base = float(np.log(ybar) - np.log1p(-ybar))
    deaths = np.bincount(bundle.hosp_idx, weights=bundle.y, minlength=bundle.H)
    shrunk = (deaths + ybar) / (bundle.n_h + 1.0)
    alpha = np.log(shrunk) - np.log1p(-shrunk)

    hyper = {"sigma2_alpha": 0.1, "sigma2_beta": 1.0}
    kind = spec.mean.kind
    if kind == "constant":
        hyper.update(mu_alpha=base, g=1.0)
    elif kind == "linear":
        hyper.update(gamma0=base, gamma1=0.0, g=1.0)
    else:
        # constant spline coefficients lie in the penalty null space
        hyper.update(gamma_S=np.full(bundle.basis.k, base), g_S=1.0)
        if kind == "spline_linear":
            hyper.update(gamma_L=np.zeros(bundle.attr_matrix.shape[1]), g_L=1.0)
    if spec.has_delta:
        hyper.update(delta=0.0, g_delta=1.0)
    return ParamState(alpha=alpha, beta=np.zeros(bundle.d), hyper=hyper)


def _hyper_layout(spec: ModelSpec, bundle: DesignBundle):
    names = []
    if spec.mean.kind == "constant":
        names.append(("mu_alpha", 1))
    elif spec.mean.kind == "linear":
        names += [("gamma0", 1), ("gamma1", 1)]
    else:
        names.append(("gamma_S", bundle.basis.k))
        if spec.mean.kind == "spline_linear":
            names.append(("gamma_L", bundle.attr_matrix.shape[1]))
    if spec.mean.kind in ("constant", "linear"):
        names.append(("g", 1))
    else:
        names.append(("g_S", 1))
        if spec.mean.kind == "spline_linear":
            names.append(("g_L", 1))
    names += [("sigma2_alpha", 1), ("sigma2_beta", 1)]
    if spec.has_delta:
        names += [("delta", 1), ("g_delta", 1)]
    return names


def run_chain(spec: ModelSpec, data, config: ChainConfig,
              stream_id: int = 0) -> PosteriorSamples:
    """Run one chain; deterministic given (seed, stream_id, data, spec).

    ``data`` may be a Dataset or a prebuilt DesignBundle.
    """
    bundle = data if isinstance(data, DesignBundle) else build_design(data, spec)
    rng = pg.RngStream(config.seed, stream_id)
    state = initial_state(spec, bundle)

    n_keep = len(range(config.burnin, config.iterations, config.thin))
    alpha_out = np.empty((n_keep, bundle.H))
    beta_out = np.empty((n_keep, bundle.d))
    layout = _hyper_layout(spec, bundle)
    hyper_out = {name: np.empty((n_keep, size)) if size > 1 else np.empty(n_keep)
                 for name, size in layout}

    step = config.delta_step
    accept_post = 0
    delta_updates_post = 0
    kept = 0
    for it in range(config.iterations):
        state.omega = update_omega(state, bundle, rng)
        state.alpha = update_alpha(state, bundle, spec, rng)
        state.beta = update_beta(state, bundle, spec, rng)
        hyper, accepted = update_hyper(state, bundle, spec, rng, delta_step=step)
        state.hyper = hyper

        if accepted is not None:
            if it < config.burnin:
                # vanishing adaptation toward 0.44 acceptance, frozen afterwards
                eta = 2.0 / (it + 20.0) ** 0.6
                step *= np.exp(eta * ((1.0 if accepted else 0.0) - 0.44))
            else:
                delta_updates_post += 1
                accept_post += 1 if accepted else 0

        if not (np.all(np.isfinite(state.alpha)) and np.all(np.isfinite(state.beta))):
            raise NumericalError(f"non-finite state at iteration {it}")

        if it >= config.burnin and (it - config.burnin) % config.thin == 0:
            alpha_out[kept] = state.alpha
            beta_out[kept] = state.beta
            for name, size in layout:
                if size > 1:
                    hyper_out[name][kept] = state.hyper[name]
                else:
                    hyper_out[name][kept] = float(state.hyper[name])
            kept += 1

    acc_rate = accept_post / delta_updates_post if delta_updates_post else None
    if acc_rate is not None and not (0.1 <= acc_rate <= 0.7):
        warnings.warn(f"delta acceptance rate {acc_rate:.3f} outside [0.1, 0.7] "
                      "after adaptation", stacklevel=2)

    meta = {
        "spec_hash": bundle.spec_hash, "data_hash": bundle.data_hash,
        "seed": config.seed, "stream_id": stream_id,
        "iterations": config.iterations, "burnin": config.burnin,
        "thin": config.thin, "n_chains": 1,
        "delta_acceptance": acc_rate, "delta_step": float(step),
        "pg_backend": pg.active_backend(),
        "hospital_ids": list(bundle.hospital_ids),
        "beta_names": list(bundle.col_names),
    }
    return PosteriorSamples(alpha=alpha_out, beta=beta_out, hyper=hyper_out, meta=meta)


def run_chains(spec: ModelSpec, data, config: ChainConfig, threads: int = 1):
    """Run ``config.n_chains`` chains on distinct streams; returns the list."""
    bundle = data if isinstance(data, DesignBundle) else build_design(data, spec)
    ids = list(range(config.n_chains))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda sid: run_chain(spec, bundle, config, stream_id=sid), ids))
    return [run_chain(spec, bundle, config, stream_id=sid) for sid in ids]


# ---------------------------------------------------------------------------
# persistence: columnar CSV of retained draws plus a JSON meta sidecar

def _sample_columns(samples: PosteriorSamples):
    cols = [(f"alpha.{hid}", samples.alpha[:, i])
            for i, hid in enumerate(samples.meta["hospital_ids"])]
    cols += [(f"beta.{j}", samples.beta[:, j]) for j in range(samples.beta.shape[1])]
    for name in sorted(samples.hyper):
        arr = samples.hyper[name]
        if arr.ndim > 1:
            cols += [(f"{name}.{j}", arr[:, j]) for j in range(arr.shape[1])]
        else:
            cols.append((name, arr))
    return cols


def save_samples(samples: PosteriorSamples, samples_path, meta_path):
    from .util import format_float, write_json
    cols = _sample_columns(samples)
    with open(samples_path, "w", newline="") as fh:
        fh.write(",".join(name for name, _ in cols) + "\n")
        for s in range(samples.S):
            fh.write(",".join(format_float(float(arr[s])) for _, arr in cols) + "\n")
    meta = dict(samples.meta)
    meta["hyper_layout"] = {k: (list(v.shape[1:]) or [0]) for k, v in samples.hyper.items()}
    write_json(meta_path, meta)


def load_samples(samples_path, meta_path) -> PosteriorSamples:
    import csv as _csv
    import json as _json
    with open(meta_path) as fh:
        meta = _json.load(fh)
    with open(samples_path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    idx = {name: j for j, name in enumerate(header)}
    alpha = rows[:, [idx[f"alpha.{h}"] for h in meta["hospital_ids"]]]
    beta_cols = sorted((int(n.split(".", 1)[1]), j) for n, j in idx.items()
                       if n.startswith("beta."))
    beta = rows[:, [j for _, j in beta_cols]]
    hyper = {}
    for name, shape in meta["hyper_layout"].items():
        if shape == [0]:
            hyper[name] = rows[:, idx[name]]
        else:
            hyper[name] = rows[:, [idx[f"{name}.{j}"] for j in range(shape[0])]]
    meta.pop("hyper_layout", None)
    return PosteriorSamples(alpha=alpha, beta=beta, hyper=hyper, meta=meta)

"""Small shared helpers: stable logistic transforms, hashing, CSV writing."""

import csv
import hashlib
import json

import numpy as np


def expit(x):
    """Numerically stable logistic inverse."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def log1pexp(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0))))
    return out if out.ndim else float(out)


def bernoulli_loglik(y, linpred):
    """Sum of Bernoulli log-likelihoods for logits ``linpred``."""
    # log p = -log1pexp(-lp), log(1-p) = -log1pexp(lp)
    return float(np.sum(np.where(y == 1, -log1pexp(-linpred), -log1pexp(linpred))))


def log_mean_exp(values) -> float:
    """log((1/n) sum exp(v_i)) without underflow."""
    values = np.asarray(values, dtype=np.float64)
    m = values.max()
    return float(m + np.log(np.mean(np.exp(values - m))))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_short(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def format_float(x) -> str:
    """Shortest exact decimal form, for byte-stable CSV output."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) for v in row])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")

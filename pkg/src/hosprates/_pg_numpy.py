"""NumPy fallback for the PG(1, c) sampler.

Same alternating-series accept/reject scheme as the compiled kernel, run in
batched vectorized passes.  Each backend is deterministic under a fixed seed,
but the two consume the underlying bit stream in different orders, so draws
are not interchangeable between backends.
"""

import numpy as np
from scipy.special import log_ndtr

TRUNC = 0.64


def _mass_texpon(z):
    fz = 0.125 * np.pi**2 + 0.5 * z * z
    b = (TRUNC * z - 1.0) / np.sqrt(TRUNC)
    a = -(TRUNC * z + 1.0) / np.sqrt(TRUNC)
    x0 = np.log(fz) + fz * TRUNC
    xb = np.minimum(x0 - z + log_ndtr(b), 690.0)
    xa = np.minimum(x0 + z + log_ndtr(a), 690.0)
    # at the cap the right-piece mass is zero to double precision anyway
    return 1.0 / (1.0 + 4.0 / np.pi * (np.exp(xb) + np.exp(xa)))


def _a_coef(n, x):
    k = (n + 0.5) * np.pi
    out = np.empty_like(x)
    right = x > TRUNC
    out[right] = k * np.exp(-0.5 * k * k * x[right])
    xl = x[~right]
    out[~right] = np.exp(
        -1.5 * (np.log(0.5 * np.pi) + np.log(xl)) + np.log(k)
        - 2.0 * (n + 0.5) ** 2 / xl
    )
    return out


def _rtigauss(gen, z):
    """Batched inverse-Gaussian(1/z, 1) draws truncated to (0, TRUNC]."""
    x = np.empty_like(z)
    low = TRUNC * z < 1.0

    idx = np.flatnonzero(low)
    while idx.size:
        e1 = gen.standard_exponential(idx.size)
        e2 = gen.standard_exponential(idx.size)
        ok = e1 * e1 <= 2.0 * e2 / TRUNC
        cand = idx[ok]
        xc = TRUNC / (1.0 + TRUNC * e1[ok]) ** 2
        acc = gen.random(cand.size) <= np.exp(-0.5 * z[cand] ** 2 * xc)
        x[cand[acc]] = xc[acc]
        idx = np.concatenate([idx[~ok], cand[~acc]])

    idx = np.flatnonzero(~low)
    while idx.size:
        mu = 1.0 / z[idx]
        y = gen.standard_normal(idx.size) ** 2
        mu_y = mu * y
        xc = mu + 0.5 * mu * mu_y - 0.5 * mu * np.sqrt(4.0 * mu_y + mu_y**2)
        flip = gen.random(idx.size) > mu / (mu + xc)
        xc[flip] = mu[flip] ** 2 / xc[flip]
        done = xc <= TRUNC
        x[idx[done]] = xc[done]
        idx = idx[~done]

    return x


def fill_pg1(gen, c, out):
    """Fill ``out`` with one PG(1, c[i]) draw per entry of ``c``."""
    z = 0.5 * np.abs(np.asarray(c, dtype=np.float64))
    pending = np.arange(z.size)
    while pending.size:
        zz = z[pending]
        fz = 0.125 * np.pi**2 + 0.5 * zz * zz
        right = gen.random(pending.size) < _mass_texpon(zz)
        x = np.empty(pending.size)
        x[right] = TRUNC + gen.standard_exponential(int(right.sum())) / fz[right]
        x[~right] = _rtigauss(gen, zz[~right])

        s = _a_coef(0, x)
        y = gen.random(pending.size) * s
        acc = np.zeros(pending.size, dtype=bool)
        rej = np.zeros(pending.size, dtype=bool)
        n = 0
        while True:
            idx = np.flatnonzero(~(acc | rej))
            if not idx.size:
                break
            n += 1
            an = _a_coef(n, x[idx])
            if n % 2 == 1:
                s[idx] -= an
                hit = y[idx] <= s[idx]
                acc[idx[hit]] = True
            else:
                s[idx] += an
                hit = y[idx] > s[idx]
                rej[idx[hit]] = True

        out[pending[acc]] = 0.25 * x[acc]
        pending = pending[rej]
    return out

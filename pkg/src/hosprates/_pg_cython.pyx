"""Compiled exact PG(1, c) sampler (alternating-series accept/reject)."""

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport M_PI, erfc, exp, fabs, log, sqrt

from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (
    random_standard_exponential,
    random_standard_normal,
    random_standard_uniform,
)

cdef double TRUNC = 0.64
cdef double INV_SQRT2 = 0.7071067811865475244
cdef double LOG_SQRT_2PI = 0.9189385332046727418


cdef inline double _log_norm_cdf(double x) noexcept nogil:
    cdef double x2
    if x > -37.0:
        return log(0.5 * erfc(-x * INV_SQRT2))
    # asymptotic tail, erfc underflows below this point
    x2 = x * x
    return -0.5 * x2 - log(-x) - LOG_SQRT_2PI


cdef inline double _mass_texpon(double z) noexcept nogil:
    # probability of proposing from the truncated-exponential right piece
    cdef double fz = 0.125 * M_PI * M_PI + 0.5 * z * z
    cdef double b = (TRUNC * z - 1.0) / sqrt(TRUNC)
    cdef double a = -(TRUNC * z + 1.0) / sqrt(TRUNC)
    cdef double x0 = log(fz) + fz * TRUNC
    cdef double xb = x0 - z + _log_norm_cdf(b)
    cdef double xa = x0 + z + _log_norm_cdf(a)
    if xb > 690.0 or xa > 690.0:
        return 0.0
    return 1.0 / (1.0 + 4.0 / M_PI * (exp(xb) + exp(xa)))


cdef inline double _a_coef(int n, double x) noexcept nogil:
    # piecewise Jacobi-density series coefficient, crossover at TRUNC
    cdef double k = (n + 0.5) * M_PI
    if x > TRUNC:
        return k * exp(-0.5 * k * k * x)
    return exp(-1.5 * (log(0.5 * M_PI) + log(x)) + log(k)
               - 2.0 * (n + 0.5) * (n + 0.5) / x)


cdef double _rtigauss(bitgen_t *rng, double z) noexcept nogil:
    # inverse-Gaussian(1/z, 1) truncated to (0, TRUNC]
    cdef double x = TRUNC + 1.0
    cdef double alpha, e1, e2, mu, y, half_mu, mu_y
    if TRUNC * z < 1.0:
        # mean above the truncation point (covers z = 0): tilted one-sided
        # stable proposal via paired exponentials
        alpha = 0.0
        while random_standard_uniform(rng) > alpha:
            e1 = random_standard_exponential(rng)
            e2 = random_standard_exponential(rng)
            while e1 * e1 > 2.0 * e2 / TRUNC:
                e1 = random_standard_exponential(rng)
                e2 = random_standard_exponential(rng)
            x = TRUNC / ((1.0 + TRUNC * e1) * (1.0 + TRUNC * e1))
            alpha = exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > TRUNC:
            y = random_standard_normal(rng)
            y = y * y
            half_mu = 0.5 * mu
            mu_y = mu * y
            x = mu + half_mu * mu_y - half_mu * sqrt(4.0 * mu_y + mu_y * mu_y)
            if random_standard_uniform(rng) > mu / (mu + x):
                x = mu * mu / x
    return x


cdef double _draw_pg1(bitgen_t *rng, double c) noexcept nogil:
    cdef double z = 0.5 * fabs(c)
    cdef double fz = 0.125 * M_PI * M_PI + 0.5 * z * z
    cdef double ratio = _mass_texpon(z)
    cdef double x, s, y
    cdef int n
    while True:
        if random_standard_uniform(rng) < ratio:
            x = TRUNC + random_standard_exponential(rng) / fz
        else:
            x = _rtigauss(rng, z)
        s = _a_coef(0, x)
        y = random_standard_uniform(rng) * s
        n = 0
        while True:
            n += 1
            if n & 1:
                s -= _a_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _a_coef(n, x)
                if y > s:
                    break


def fill_pg1(bit_generator, double[::1] c, double[::1] out):
    """Fill ``out`` with one PG(1, c[i]) draw per entry of ``c``."""
    cdef bitgen_t *rng
    cdef Py_ssize_t i, n = c.shape[0]
    if out.shape[0] != n:
        raise ValueError("output length does not match input length")
    capsule = bit_generator.capsule
    rng = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    with bit_generator.lock, nogil:
        for i in range(n):
            out[i] = _draw_pg1(rng, c[i])

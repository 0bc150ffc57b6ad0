"""Exact Pólya-Gamma PG(1, c) sampling.

The sampler drives the latent-variable augmentation of the Gibbs engine, so
it is the hot inner loop of every fit.  A compiled Cython kernel is used when
available; otherwise a batched NumPy implementation of the same exact
algorithm takes over.  Select explicitly with the ``HOSPRATES_PG_BACKEND``
environment variable (``cython`` or ``numpy``) or :func:`set_backend`.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _pg_numpy

try:
    from . import _pg_cython
except ImportError:  # extension not built on this install
    _pg_cython = None

__all__ = [
    "RngStream",
    "active_backend",
    "available_backends",
    "pg1_mean",
    "pg1_var",
    "sample_pg1",
    "sample_pg1_many",
    "set_backend",
]

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """A reproducible random stream keyed by (seed, stream_id).

    Identical keys replay the identical draw sequence; distinct stream ids
    give statistically independent streams.  A stream is owned by exactly one
    worker; it is not safe to share across threads.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(
            entropy=self.seed & _MASK64, spawn_key=(self.stream_id & _MASK64,)
        )
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def substream(self, offset: int) -> "RngStream":
        """Independent stream derived from the same seed."""
        return RngStream(self.seed, self.stream_id + offset)


def available_backends() -> tuple[str, ...]:
    if _pg_cython is not None:
        return ("cython", "numpy")
    return ("numpy",)


def _pick_default() -> str:
    forced = os.environ.get("HOSPRATES_PG_BACKEND", "").strip().lower()
    if forced in ("cython", "numpy"):
        if forced == "cython" and _pg_cython is None:
            raise ImportError(
                "HOSPRATES_PG_BACKEND=cython but the compiled kernel is not built"
            )
        return forced
    return "cython" if _pg_cython is not None else "numpy"


_BACKEND = _pick_default()


def active_backend() -> str:
    """Name of the backend currently serving draws."""
    return _BACKEND


def set_backend(name: str) -> None:
    """Switch backends (used by tests and benchmarks)."""
    global _BACKEND
    if name not in ("cython", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and _pg_cython is None:
        raise ValueError("compiled kernel is not available")
    _BACKEND = name


def pg1_mean(c):
    """E[PG(1, c)] = tanh(c/2) / (2c), with the analytic limit 1/4 at c = 0."""
    c = np.asarray(c, dtype=np.float64)
    small = np.abs(c) < 1e-4
    safe = np.where(small, 1.0, c)
    direct = np.tanh(safe / 2.0) / (2.0 * safe)
    series = 0.25 * (1.0 - c * c / 12.0)
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def pg1_var(c):
    """Var[PG(1, c)], with the analytic limit 1/24 at c = 0."""
    c = np.asarray(c, dtype=np.float64)
    small = np.abs(c) < 1e-3
    safe = np.where(small, 1.0, c)
    direct = (np.sinh(safe) - safe) / (4.0 * safe**3 * np.cosh(safe / 2.0) ** 2)
    series = (1.0 - c * c / 5.0) / 24.0
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def sample_pg1_many(c, rng: RngStream, out=None) -> np.ndarray:
    """Draw one exact PG(1, c[i]) variate per entry of ``c``.

    Parameters
    ----------
    c : array_like
        Tilting parameters; the distribution depends on ``c`` only through
        ``|c|``.  All entries must be finite.
    rng : RngStream
        Stream supplying the randomness; advanced in place.
    out : ndarray, optional
        Preallocated float64 output of matching length.
    """
    c = np.ascontiguousarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("c must be one-dimensional")
    if not np.all(np.isfinite(c)):
        bad = int(np.flatnonzero(~np.isfinite(c))[0])
        raise ValueError(f"non-finite tilting parameter at index {bad}")
    if out is None:
        out = np.empty(c.shape[0], dtype=np.float64)
    if _BACKEND == "cython":
        _pg_cython.fill_pg1(rng.generator.bit_generator, c, out)
    else:
        _pg_numpy.fill_pg1(rng.generator, c, out)
    return out


def sample_pg1(c: float, rng: RngStream) -> float:
    """Draw one exact PG(1, c) variate."""
    return float(sample_pg1_many(np.array([c], dtype=np.float64), rng)[0])

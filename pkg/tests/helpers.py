"""Test-only oracles and shared scaffolding."""

import numpy as np

from hosprates import pg
from hosprates.data import Dataset, HospitalRecord, PatientRecord


def oracle_pg1(gen, c, n, terms=200):
    """Truncated gamma-convolution sampler for PG(1, c).

    Independent of the production sampler: sums ``terms`` exponential
    components of the infinite convolution and rescales by the exact/trunc
    mean ratio to remove the truncation bias.
    """
    denom = (np.arange(terms) + 0.5) ** 2 + c**2 / (4 * np.pi**2)
    draws = gen.standard_exponential((n, terms))
    x = (draws / denom).sum(axis=1) / (2 * np.pi**2)
    trunc_mean = (1.0 / denom).sum() / (2 * np.pi**2)
    return x * (pg.pg1_mean(c) / trunc_mean)


def mean_se(x):
    x = np.asarray(x)
    return x.mean(), x.std(ddof=1) / np.sqrt(x.size)


def var_se(x):
    """Sample variance and its standard error from the fourth moment."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    v = x.var(ddof=1)
    m4 = np.mean((x - x.mean()) ** 4)
    return v, np.sqrt(max(m4 - v**2, 0.0) / n)


def toy_dataset(n_per=(3, 2, 4), d=2, seed=0, volumes=(10, 99, 400),
                outcomes=None):
    """Small hand-inspectable dataset; hospital i gets n_per[i] patients."""
    gen = np.random.default_rng(seed)
    hospitals = tuple(
        HospitalRecord(f"H{i}", volumes[i],
                       {"ntbr": 0.5 + 0.1 * i, "rtbr": 0.1 * i, "pci": float(i % 2)})
        for i in range(len(n_per)))
    patients = []
    k = 0
    for i, n in enumerate(n_per):
        for _ in range(n):
            y = int(gen.random() < 0.3) if outcomes is None else outcomes[k]
            patients.append(PatientRecord(
                f"P{k}", f"H{i}", y, float(gen.uniform(67, 95)),
                int(gen.integers(1, 4)), tuple(gen.normal(size=d))))
            k += 1
    n_h = np.array([n for n in n_per], dtype=np.int64)
    ybar = np.mean([p.outcome for p in patients])
    return Dataset(patients=tuple(patients), hospitals=hospitals,
                   covariate_names=tuple(f"x{j+1}" for j in range(d)),
                   n_h=n_h, ybar=float(ybar),
                   cold_start_ids=tuple(h.hospital_id
                                        for h, n in zip(hospitals, n_h) if n == 0))


def brute_force_assignment(dist, admissible, k):
    """Exact minimum-total-distance k-to-1 assignment by subset DP.

    ``dist`` is T x C; slots are the treated units repeated k times.  The
    DP state is (slot index, frozenset of used controls) realized as a dict
    keyed by bitmask; exponential in C, fine for C <= 14.
    """
    t, c = dist.shape
    slots = [i for i in range(t) for _ in range(k)]
    best = {0: 0.0}
    for slot in slots:
        nxt = {}
        for used, cost in best.items():
            for ctrl in range(c):
                if used >> ctrl & 1 or not admissible[slot, ctrl]:
                    continue
                key = used | (1 << ctrl)
                val = cost + dist[slot, ctrl]
                if key not in nxt or val < nxt[key]:
                    nxt[key] = val
        best = nxt
        if not best:
            return None
    return min(best.values())

import numpy as np
import pytest

from recurrent_iptw.cohort import Cohort, PatientRecord


def make_cohort(n=20, T=3, d=2, p=None, k=1, K=1, seed=0, binary=False, groups=False) -> Cohort:
    """Random cohort with absorbing treatment sequences (initiation uniform over 0..T)."""
    rng = np.random.default_rng(seed)
    p = d if p is None else p
    records = []
    for i in range(n):
        init = int(rng.integers(0, T + 1))
        a = np.zeros(T, dtype=np.int64)
        if init:
            a[init - 1:] = int(rng.integers(1, k + 1))
        if binary:
            y = rng.integers(0, 2, size=K).astype(float)
        else:
            y = rng.normal(size=K)
        records.append(PatientRecord(i, rng.normal(size=d), rng.normal(size=(T, p)), a,
                                     float(y[0]) if K == 1 else y, int(rng.integers(0, 2)) if groups else None))
    cohort = Cohort(records, d=d, T=T, K=K, p=p, k=k)
    cohort.validate()
    return cohort


@pytest.fixture
def toy_cohort():
    return make_cohort()

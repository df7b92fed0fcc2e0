import math

import numpy as np
import pytest

from crtnd import ClusterRecord, PotentialTable


def make_records(lvals, arms, *, z=100.0, covariates=None, doses=None):
    """Clusters whose log-contrasts equal ``lvals`` exactly (z fixed)."""
    records = []
    for i, (l, a) in enumerate(zip(lvals, arms)):
        records.append(
            ClusterRecord(
                cluster_id=f"c{i:02d}",
                arm=int(a),
                y_count=z * math.exp(l),
                z_count=z,
                covariates=tuple(covariates[i]) if covariates is not None else (),
                dose=None if doses is None else float(doses[i]),
            )
        )
    return records


@pytest.fixture
def oracle_table_m6():
    """m=6 table with heterogeneous ascertainment and a covariate."""
    rng = np.random.default_rng(42)
    y0 = rng.uniform(20, 120, size=6)
    z0 = rng.uniform(60, 300, size=6)
    c = rng.uniform(0.3, 1.6, size=6)
    x = rng.uniform(0.8, 2.5, size=(6, 1))

    def build(lam):
        return PotentialTable(lam=lam, y0=y0, z0=z0, c=c, covariates=x)

    return build

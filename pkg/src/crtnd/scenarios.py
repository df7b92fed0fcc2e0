"""Bundled synthetic baselines and default simulation scenarios.

The shipped baselines are synthetic 24-cluster tables with totals
comparable to a city-scale arboviral surveillance system (roughly 2,800
test-positives against 8,500 test-negatives over the study window, and
cluster populations between 0.85 and 2.65 in units of 10,000).  They
are not measurements; simulation results on them are qualitative
patterns, not reproductions of any particular study.
"""

from __future__ import annotations

from .core import ParallelScheme, SteppedWedgeScheme
from .simulation import SimScenario

# Per-cluster test-positive baselines (aggregated study window).
BASELINE_Y = (
    61, 134, 163, 184, 58, 170, 168, 111, 63, 164, 117, 167,
    74, 142, 79, 80, 109, 98, 65, 82, 121, 74, 152, 128,
)

# Per-cluster test-negative baselines (same window; pooled ratio ~3.4,
# with one high-ratio cluster giving the cluster effects a heavy tail).
BASELINE_Z = (
    153, 518, 414, 564, 176, 562, 536, 290, 217, 480, 276, 608,
    169, 437, 248, 245, 396, 1176, 232, 303, 370, 251, 497, 333,
)

# Cluster population in 10,000s, used as the adjustment covariate and in
# the covariate-coupling transform.
POPULATION = (
    2.25, 1.54, 1.32, 1.69, 2.36, 2.43, 2.23, 2.19, 1.42, 1.56, 1.69, 2.08,
    1.33, 1.54, 1.57, 2.51, 1.56, 1.09, 1.85, 1.60, 1.59, 1.19, 1.61, 1.82,
)

# Per-(cluster, period) test-positive baselines for the 9-period wedge.
# Period totals swing widely (two sparse early periods, one large-
# outbreak period), and cluster-by-period variation is present, so the
# temporal correlation of outcomes differs across clusters and the
# per-period contrasts have markedly unequal variances.
SW_BASELINE_Y = (
    (15, 3, 5, 21, 19, 21, 58, 18, 35),
    (34, 11, 12, 37, 37, 33, 189, 42, 70),
    (32, 12, 16, 56, 106, 59, 149, 71, 69),
    (44, 15, 11, 90, 50, 50, 198, 82, 89),
    (17, 3, 4, 36, 17, 16, 35, 18, 37),
    (58, 23, 6, 83, 73, 30, 133, 81, 111),
    (84, 11, 20, 72, 38, 49, 138, 76, 92),
    (24, 7, 18, 44, 59, 50, 67, 29, 63),
    (13, 4, 6, 31, 28, 24, 66, 26, 39),
    (38, 11, 12, 112, 43, 55, 242, 75, 74),
    (65, 5, 9, 32, 45, 34, 96, 51, 34),
    (70, 6, 18, 65, 57, 59, 192, 141, 95),
    (14, 4, 9, 58, 37, 26, 58, 27, 20),
    (31, 7, 13, 89, 57, 43, 94, 53, 86),
    (31, 4, 10, 45, 49, 28, 88, 39, 35),
    (18, 6, 5, 44, 33, 18, 72, 47, 31),
    (24, 11, 6, 54, 43, 28, 83, 37, 53),
    (20, 6, 7, 28, 43, 35, 94, 49, 42),
    (22, 6, 8, 59, 28, 16, 59, 28, 32),
    (20, 5, 7, 37, 47, 15, 78, 25, 29),
    (39, 8, 8, 51, 38, 17, 70, 78, 36),
    (14, 3, 6, 42, 27, 27, 54, 27, 43),
    (20, 11, 24, 110, 43, 68, 139, 47, 63),
    (29, 11, 7, 63, 44, 52, 109, 33, 70),
)

# Rollout: nobody starts at period 1; three clusters start at each of
# periods 2..9 until all 24 are under intervention.
SW_Q = (0, 3, 3, 3, 3, 3, 3, 3, 3)


def default_parallel_scenario(
    lam: float = 1.0,
    *,
    n_replicates: int = 10_000,
    seed: int = 1,
    covariate_coupling: bool = True,
) -> SimScenario:
    """The shipped 24-cluster, equal-allocation parallel scenario."""
    return SimScenario(
        scenario_id=f"default-parallel-lam{lam:g}",
        design=ParallelScheme(m=24, m1=12),
        baseline_y=BASELINE_Y,
        baseline_z=BASELINE_Z,
        covariates=POPULATION,
        covariate_coupling=covariate_coupling,
        lam=lam,
        n_replicates=n_replicates,
        seed=seed,
    )


def default_sw_scenario(
    lam: float = 1.0,
    *,
    n_replicates: int = 5_000,
    seed: int = 1,
) -> SimScenario:
    """The shipped 24-cluster, 9-period stepped-wedge scenario."""
    return SimScenario(
        scenario_id=f"default-sw-lam{lam:g}",
        design=SteppedWedgeScheme(m=24, q=SW_Q),
        baseline_y=SW_BASELINE_Y,
        baseline_z=BASELINE_Z,
        lam=lam,
        n_replicates=n_replicates,
        seed=seed,
    )

"""Point and variance estimators for the parallel-arm design.

Four estimators of the intervention relative risk ``lam`` are provided:

* ``odds_ratio_estimate``: the classical pooled-count odds ratio.  It is
  biased when the relative ascertainment varies across clusters, and is
  included as a comparison baseline.  Its standard error is taken from
  the dispersion of the statistic over re-randomized arm labels (the
  literature formula is not reproduced here).
* ``tpf_statistic`` / ``tpf_solve``: the test-positive-fraction
  estimator, obtained by matching the observed arm-mean difference of
  test-positive fractions to its approximate expectation and solving the
  resulting quadratic in ``lam``.
* ``log_contrast_estimate``: the arm-mean difference of per-cluster
  log-contrasts, exactly unbiased for ``log(lam)`` under the constant
  relative-risk count model, with an unbiased variance estimator.
* ``covariate_adjusted_estimate``: the log-contrast estimator minus a
  linear covariate-imbalance correction, unbiased for any fixed
  coefficient vector and more precise at the variance-minimizing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .core import (
    ClusterRecord,
    ParallelScheme,
    derive_rng,
    enumerate_assignments,
    log_contrasts,
    sample_assignments,
    validate_records,
)
from .errors import (
    AmbiguousRoot,
    ArmTooSmall,
    EmptyCluster,
    NoAdmissibleRoot,
    RankDeficientCovariates,
    ZeroArmTotal,
    ZeroPositiveTotal,
)

__all__ = [
    "EstimateReport",
    "CovariateFit",
    "odds_ratio_estimate",
    "tpf_statistic",
    "tpf_expected",
    "tpf_solve",
    "tpf_estimate",
    "log_contrast_estimate",
    "covariate_adjusted_estimate",
]


@dataclass
class EstimateReport:
    """One estimator's output: log-scale estimate, SE, natural-scale CI.

    ``log_estimate`` is log(lam-hat) for relative-risk methods and the
    dose coefficient itself for dose-response.  ``ci_low``/``ci_high``
    are on the natural scale (lam > 0, or the real line for the dose
    coefficient).  ``diagnostics`` carries method-specific extras such
    as fitted adjustment coefficients or root-selection notes.
    """

    method: str
    log_estimate: float
    se_log: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    ci_method: str = "none"
    alpha: float = 0.05
    p_value: float | None = None
    scale: str = "lambda"
    diagnostics: dict = field(default_factory=dict)

    @property
    def estimate(self) -> float:
        """Point estimate on the natural scale."""
        if self.scale == "lambda":
            return math.exp(self.log_estimate)
        return self.log_estimate

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "log_estimate": self.log_estimate,
            "estimate": self.estimate,
            "se_log": self.se_log,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ci_method": self.ci_method,
            "alpha": self.alpha,
            "p_value": self.p_value,
            "scale": self.scale,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class CovariateFit:
    """Adjustment coefficients and per-arm residual variances."""

    beta_hat: np.ndarray
    beta_treated: np.ndarray
    beta_control: np.ndarray
    resid_var_treated: float
    resid_var_control: float


# --------------------------------------------------------------------- #
# Shared helpers
# --------------------------------------------------------------------- #


def split_arms(records: Sequence[ClusterRecord]):
    """(treated, control) sublists; both must be nonempty."""
    validate_records(records)
    treated = [r for r in records if r.arm == 1]
    control = [r for r in records if r.arm == 0]
    if not treated or not control:
        raise ArmTooSmall(
            f"both arms must be nonempty (treated={len(treated)}, "
            f"control={len(control)})"
        )
    return treated, control


@lru_cache(maxsize=64)
def _z_quantile(alpha: float) -> float:
    return float(norm.ppf(1.0 - alpha / 2.0))


def normal_ci(log_estimate: float, se: float, alpha: float) -> tuple[float, float]:
    """lam-scale CI: exp(log_estimate +- z_{1-alpha/2} * se)."""
    zq = _z_quantile(alpha)
    return math.exp(log_estimate - zq * se), math.exp(log_estimate + zq * se)


# --------------------------------------------------------------------- #
# Odds ratio
# --------------------------------------------------------------------- #


def odds_ratio_log(records: Sequence[ClusterRecord]) -> float:
    """log of the pooled-count odds ratio; raises ZeroArmTotal on zero sums."""
    sums = {
        "treated test-positive": sum(r.y_count for r in records if r.arm == 1),
        "control test-positive": sum(r.y_count for r in records if r.arm == 0),
        "treated test-negative": sum(r.z_count for r in records if r.arm == 1),
        "control test-negative": sum(r.z_count for r in records if r.arm == 0),
    }
    for name, value in sums.items():
        if value <= 0:
            raise ZeroArmTotal(name)
    return (
        math.log(sums["treated test-positive"])
        - math.log(sums["control test-positive"])
        + math.log(sums["control test-negative"])
        - math.log(sums["treated test-negative"])
    )


def odds_ratio_permutation_draws(
    y: np.ndarray, z: np.ndarray, arm_matrix: np.ndarray
) -> np.ndarray:
    """log odds ratio for each 0/1 row of ``arm_matrix``, counts held fixed."""
    ty = arm_matrix @ y
    tz = arm_matrix @ z
    cy = y.sum() - ty
    cz = z.sum() - tz
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.log(ty) - np.log(cy) + np.log(cz) - np.log(tz)
    return vals


def odds_ratio_estimate(
    records: Sequence[ClusterRecord],
    *,
    alpha: float = 0.05,
    se_draws: int = 2000,
    seed: int = 0,
    enumeration_limit: int = 20000,
) -> EstimateReport:
    """Pooled odds-ratio estimate with a re-randomization standard error.

    The SE is the standard deviation of the log odds ratio over arm
    relabelings with per-cluster counts held fixed: full enumeration
    when the support has at most ``enumeration_limit`` elements, else
    ``se_draws`` Monte Carlo relabelings from ``seed``.
    """
    treated, control = split_arms(records)
    log_or = odds_ratio_log(records)
    y = np.array([r.y_count for r in records])
    z = np.array([r.z_count for r in records])
    scheme = ParallelScheme(m=len(records), m1=len(treated))
    if scheme.total_assignments <= enumeration_limit:
        arm_matrix = np.array(list(enumerate_assignments(scheme)))
        se_source = "permutation-exact"
    else:
        arm_matrix = sample_assignments(scheme, se_draws, derive_rng(seed, 0x0D))
        se_source = f"permutation-mc({se_draws})"
    draws = odds_ratio_permutation_draws(y, z, arm_matrix)
    draws = draws[np.isfinite(draws)]
    se = float(np.std(draws, ddof=1)) if draws.size >= 2 else None
    ci_low = ci_high = None
    if se is not None:
        ci_low, ci_high = normal_ci(log_or, se, alpha)
    return EstimateReport(
        method="odds_ratio",
        log_estimate=log_or,
        se_log=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ci_method="normal",
        alpha=alpha,
        diagnostics={"se_source": se_source},
    )


# --------------------------------------------------------------------- #
# Test-positive fraction
# --------------------------------------------------------------------- #


def tpf_statistic(records: Sequence[ClusterRecord]) -> tuple[float, float]:
    """Arm-mean difference of test-positive fractions and pooled ratio r.

    Returns ``(T, r)`` with ``T`` the treated-minus-control mean of
    ``y / (y + z)`` and ``r`` the pooled negative:positive count ratio.
    """
    treated, control = split_arms(records)
    for r in records:
        if r.y_count + r.z_count <= 0:
            raise EmptyCluster(r.cluster_id)
    total_y = sum(r.y_count for r in records)
    total_z = sum(r.z_count for r in records)
    if total_y <= 0:
        raise ZeroPositiveTotal("pooled test-positive count is zero")
    frac = lambda rec: rec.y_count / (rec.y_count + rec.z_count)
    t_val = sum(frac(r) for r in treated) / len(treated) - sum(
        frac(r) for r in control
    ) / len(control)
    return float(t_val), float(total_z / total_y)


def tpf_expected(lam: float, r: float) -> float:
    """Approximate expectation of the fraction statistic at relative risk lam.

    ``2 r (lam^2 - 1) / [((2+r) lam + r) (r lam + 2 + r)]``; increasing
    in lam with range ``(-2/(2+r), 2/(2+r))``.
    """
    return 2.0 * r * (lam * lam - 1.0) / (((2.0 + r) * lam + r) * (r * lam + 2.0 + r))


@lru_cache(maxsize=512)
def _assert_monotone(r: float) -> None:
    lams = np.logspace(-3, 3, 41)
    vals = np.array([tpf_expected(lam, r) for lam in lams])
    if not np.all(np.diff(vals) > 0):
        raise AmbiguousRoot(
            f"expected-fraction map is not monotone in lam for r={r}"
        )


def tpf_solve(t_stat: float, r: float) -> float:
    """Invert the expected-fraction map: the lam > 0 matching ``t_stat``.

    Solves the cross-multiplied quadratic

        [T r (2+r) - 2 r] lam^2 + T [(2+r)^2 + r^2] lam + [T r (2+r) + 2 r] = 0

    and returns its unique positive root.  ``t_stat`` must lie strictly
    inside the attainable range ``(-2/(2+r), 2/(2+r))``.
    """
    if not (math.isfinite(r) and r > 0):
        raise ValueError(f"r must be a positive real, got {r!r}")
    if t_stat == 0.0:
        return 1.0
    bound = 2.0 / (2.0 + r)
    if abs(t_stat) >= bound:
        raise NoAdmissibleRoot(t_stat, r, bound)
    _assert_monotone(r)
    a = r * (t_stat * (2.0 + r) - 2.0)
    b = t_stat * ((2.0 + r) ** 2 + r * r)
    c = r * (t_stat * (2.0 + r) + 2.0)
    # a < 0 < c inside the attainable range, so the roots have opposite
    # signs; the stable formula avoids cancellation in the small root.
    disc = b * b - 4.0 * a * c
    if disc <= 0:
        raise NoAdmissibleRoot(t_stat, r, bound)
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b)) if b != 0 else math.sqrt(
        -a * c
    )
    roots = [q / a, c / q] if q != 0 else [0.0, 0.0]
    positive = [x for x in roots if x > 0]
    if len(positive) != 1:
        raise AmbiguousRoot(
            f"root selection failed for T={t_stat}, r={r}: roots {roots}"
        )
    lam = positive[0]
    if (lam < 1.0) != (t_stat < 0.0):
        raise AmbiguousRoot(
            f"selected root {lam} is inconsistent with the sign of T={t_stat}"
        )
    return lam


def tpf_estimate(
    records: Sequence[ClusterRecord], *, alpha: float = 0.05
) -> EstimateReport:
    """Point estimate via the fraction statistic; no analytic SE is attached.

    A standard error for this estimator is not conveniently computable,
    so confidence intervals come from test inversion through the
    permutation engine.  A diagnostic flag is raised under unequal
    allocation, where the expected-fraction approximation is derived
    assuming equal arms.
    """
    t_stat, r = tpf_statistic(records)
    lam = tpf_solve(t_stat, r)
    m = len(records)
    m1 = sum(rec.arm for rec in records)
    diagnostics = {"t_statistic": t_stat, "r": r}
    if m != 2 * m1:
        diagnostics["unequal_allocation_warning"] = (
            f"m={m}, m1={m1}: the expected-fraction approximation assumes "
            "m1 = m/2; interpret with caution"
        )
    return EstimateReport(
        method="tpf",
        log_estimate=math.log(lam),
        se_log=None,
        ci_method="none",
        alpha=alpha,
        diagnostics=diagnostics,
    )


# --------------------------------------------------------------------- #
# Log-contrast
# --------------------------------------------------------------------- #


def _arm_arrays(records, correction):
    arms = np.array([r.arm for r in records], dtype=bool)
    lvals = log_contrasts(records, correction)
    return lvals, arms


def log_contrast_estimate(
    records: Sequence[ClusterRecord],
    *,
    alpha: float = 0.05,
    correction: bool = False,
) -> EstimateReport:
    """Arm-mean difference of log-contrasts with its unbiased variance.

    The estimate is ``mean(L | treated) - mean(L | control)``; the
    variance estimate is ``s1^2/m1 + s0^2/m0`` with per-arm sample
    variances (denominator n_a - 1).  Each arm needs at least two
    clusters.
    """
    treated, control = split_arms(records)
    if len(treated) < 2 or len(control) < 2:
        raise ArmTooSmall(
            f"variance estimation needs >= 2 clusters per arm "
            f"(treated={len(treated)}, control={len(control)})"
        )
    lvals, arms = _arm_arrays(records, correction)
    l1, l0 = lvals[arms], lvals[~arms]
    est = float(l1.mean() - l0.mean())
    var = float(np.var(l1, ddof=1) / l1.size + np.var(l0, ddof=1) / l0.size)
    se = math.sqrt(var)
    ci_low, ci_high = normal_ci(est, se, alpha)
    return EstimateReport(
        method="log_contrast",
        log_estimate=est,
        se_log=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ci_method="normal",
        alpha=alpha,
        diagnostics={"m1": l1.size, "m0": l0.size},
    )


# --------------------------------------------------------------------- #
# Covariate adjustment
# --------------------------------------------------------------------- #


def _ols_slopes(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Slopes of y on x (with intercept) and the unbiased residual variance.

    The covariates are centered before solving, which leaves slopes and
    residuals unchanged in exact arithmetic but makes the computation
    invariant to covariate translation at machine precision.
    """
    n, p = x.shape
    xc = x - x.mean(axis=0)
    design = np.column_stack([np.ones(n), xc])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < p + 1:
        raise RankDeficientCovariates(
            f"covariate design matrix has rank {rank} < {p + 1} within one arm"
        )
    resid = y - design @ coef
    dof = n - p - 1
    return coef[1:], float(resid @ resid / dof)


def covariate_adjusted_estimate(
    records: Sequence[ClusterRecord],
    beta: Sequence[float] | None = None,
    *,
    alpha: float = 0.05,
    correction: bool = False,
) -> tuple[EstimateReport, CovariateFit]:
    """Log-contrast estimate minus a linear covariate-imbalance correction.

    With ``beta`` supplied, the estimator subtracts
    ``beta . (mean X treated - mean X control)`` and is unbiased for any
    fixed vector; its SE uses per-arm sample variances of
    ``L - beta . X``.  With ``beta`` omitted, per-arm least squares of L
    on X (with intercept) give slopes that are pooled with arm-share
    weights, and the SE uses the per-arm unbiased residual variances
    (denominator n_a - p - 1).
    """
    treated, control = split_arms(records)
    p = len(records[0].covariates)
    if p == 0:
        raise ValueError("covariate adjustment requires at least one covariate")
    lvals, arms = _arm_arrays(records, correction)
    x = np.array([r.covariates for r in records], dtype=float)
    l1, l0 = lvals[arms], lvals[~arms]
    x1, x0 = x[arms], x[~arms]
    m1, m0 = l1.size, l0.size
    m = m1 + m0
    diff_x = x1.mean(axis=0) - x0.mean(axis=0)

    if beta is not None:
        beta_vec = np.asarray(beta, dtype=float)
        if beta_vec.shape != (p,):
            raise ValueError(f"beta must have shape ({p},), got {beta_vec.shape}")
        if m1 < 2 or m0 < 2:
            raise ArmTooSmall(
                f"variance estimation needs >= 2 clusters per arm "
                f"(treated={m1}, control={m0})"
            )
        g1 = l1 - x1 @ beta_vec
        g0 = l0 - x0 @ beta_vec
        v1 = float(np.var(g1, ddof=1))
        v0 = float(np.var(g0, ddof=1))
        fit = CovariateFit(
            beta_hat=beta_vec,
            beta_treated=beta_vec,
            beta_control=beta_vec,
            resid_var_treated=v1,
            resid_var_control=v0,
        )
        beta_source = "supplied"
    else:
        if m1 < p + 2 or m0 < p + 2:
            raise ArmTooSmall(
                f"per-arm least squares needs >= p+2 = {p + 2} clusters per arm "
                f"(treated={m1}, control={m0})"
            )
        b1, v1 = _ols_slopes(x1, l1)
        b0, v0 = _ols_slopes(x0, l0)
        beta_vec = (m1 / m) * b1 + (m0 / m) * b0
        fit = CovariateFit(
            beta_hat=beta_vec,
            beta_treated=b1,
            beta_control=b0,
            resid_var_treated=v1,
            resid_var_control=v0,
        )
        beta_source = "estimated"

    est = float(l1.mean() - l0.mean() - beta_vec @ diff_x)
    se = math.sqrt(v1 / m1 + v0 / m0)
    ci_low, ci_high = normal_ci(est, se, alpha)
    report = EstimateReport(
        method="covariate_adjusted",
        log_estimate=est,
        se_log=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ci_method="normal",
        alpha=alpha,
        diagnostics={
            "beta": beta_vec.tolist(),
            "beta_source": beta_source,
            "covariate_mean_difference": diff_x.tolist(),
        },
    )
    return report, fit

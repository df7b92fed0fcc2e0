"""Randomization tests, Normal tests, test inversion, and dose-response.

The permutation engine exploits one fact: under a sharp null the
per-cluster control log-contrasts are recoverable from the observed
data and do not depend on the assignment.  For a relative-risk null
``lam = lam0`` they are ``L - arm * log(lam0)``; for a linear
dose-response null ``beta = beta0`` they are ``L - beta0 * dose``.
Re-randomizing arm labels against these fixed values reproduces the
exact null distribution of any statistic, which yields exact tests,
test-inversion confidence intervals, and a p-value-maximizing point
estimate for the dose coefficient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.stats import norm

from .core import (
    ClusterRecord,
    ENUMERATION_CAP,
    ParallelScheme,
    derive_rng,
    enumerate_assignments,
    log_contrasts,
    sample_assignments,
)
from .errors import (
    ConstantDose,
    MissingDose,
    NoNonRejectedPoint,
    StatisticUndefined,
)
from .estimators import (
    EstimateReport,
    covariate_adjusted_estimate,
    log_contrast_estimate,
    odds_ratio_log,
    odds_ratio_permutation_draws,
    split_arms,
    tpf_estimate,
    tpf_expected,
    tpf_statistic,
    _ols_slopes,
)

__all__ = [
    "NullSpec",
    "PermutationResult",
    "impute_null_outcomes",
    "permutation_test",
    "normal_test",
    "invert_ci",
    "dose_response_estimate",
    "dose_response_pvalue",
]

# Ties in permutation distributions are counted with a small relative
# slack so floating-point noise cannot drop a true tie; extra ties only
# make p-values larger (conservative).
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class NullSpec:
    """A sharp null hypothesis: relative risk lam0 or dose coefficient beta0."""

    kind: str  # "relative_risk" | "dose_response"
    value: float
    adjustment: str = "none"  # "none" | "covariates"

    def __post_init__(self):
        if self.kind not in ("relative_risk", "dose_response"):
            raise ValueError(f"unknown null kind {self.kind!r}")
        if self.kind == "relative_risk" and self.value <= 0:
            raise ValueError(f"relative-risk null requires lam0 > 0, got {self.value}")
        if self.adjustment not in ("none", "covariates"):
            raise ValueError(f"unknown adjustment {self.adjustment!r}")


@dataclass
class PermutationResult:
    """Tail probabilities of a statistic over re-randomized assignments."""

    observed_stat: float
    null_draws: int
    p_two_sided: float
    p_left: float
    p_right: float
    mode: str  # "exact" | "monte_carlo"
    n_draws: int | None = None
    seed: int | None = None
    statistic: str = ""

    def to_dict(self) -> dict:
        return {
            "observed_stat": self.observed_stat,
            "null_draws": self.null_draws,
            "p_two_sided": self.p_two_sided,
            "p_left": self.p_left,
            "p_right": self.p_right,
            "mode": self.mode,
            "n_draws": self.n_draws,
            "seed": self.seed,
            "statistic": self.statistic,
        }


def impute_null_outcomes(
    records: Sequence[ClusterRecord],
    null: NullSpec,
    *,
    correction: bool = False,
) -> np.ndarray:
    """Control log-contrasts implied by a sharp null (assignment-invariant).

    relative_risk: ``L - arm * log(lam0)``.  dose_response:
    ``L - beta0 * dose`` (raises :class:`MissingDose` on records without
    a dose).
    """
    lvals = log_contrasts(records, correction)
    if null.kind == "relative_risk":
        arms = np.array([r.arm for r in records], dtype=float)
        return lvals - arms * math.log(null.value)
    doses = _dose_vector(records)
    return lvals - null.value * doses


def _dose_vector(records: Sequence[ClusterRecord]) -> np.ndarray:
    for r in records:
        if r.dose is None:
            raise MissingDose(r.cluster_id)
    return np.array([r.dose for r in records], dtype=float)


# --------------------------------------------------------------------- #
# Statistic evaluation over assignment matrices
# --------------------------------------------------------------------- #


def _diff_means_rows(values: np.ndarray, arm_matrix: np.ndarray, m1: int) -> np.ndarray:
    """Treated-minus-control mean of ``values`` for each 0/1 row."""
    m = values.shape[0]
    treated_sums = arm_matrix @ values
    total = values.sum()
    return treated_sums / m1 - (total - treated_sums) / (m - m1)


def _adjusted_diff_rows(
    values: np.ndarray, x: np.ndarray, arm_matrix: np.ndarray, m1: int
) -> np.ndarray:
    """Covariate-adjusted treated-minus-control difference per 0/1 row.

    Re-estimates the pooled per-arm least-squares slopes for every
    assignment, mirroring the full estimation procedure.  Solved as
    batched normal equations; falls back to row-by-row least squares if
    some re-randomized arm design is singular.
    """
    try:
        return _adjusted_diff_rows_batched(values, x, arm_matrix, m1)
    except np.linalg.LinAlgError:
        return _adjusted_diff_rows_loop(values, x, arm_matrix, m1)


def _adjusted_diff_rows_batched(values, x, arm_matrix, m1):
    m = values.shape[0]
    m0 = m - m1
    x = x - x.mean(axis=0)  # translation-invariant, better conditioned
    g = np.column_stack([np.ones(m), x])  # per-cluster design row (1, x_i)
    q = g.shape[1]
    gg = (g[:, :, None] * g[:, None, :]).reshape(m, q * q)
    mask1 = arm_matrix.astype(float)
    mask0 = 1.0 - mask1

    def arm_coefs(mask):
        normal = (mask @ gg).reshape(-1, q, q)
        rhs = (mask * values) @ g
        return np.linalg.solve(normal, rhs[:, :, None])[:, :, 0]

    b1 = arm_coefs(mask1)
    b0 = arm_coefs(mask0)
    slopes = (m1 * b1[:, 1:] + m0 * b0[:, 1:]) / m
    w_diff = (mask1 @ values) / m1 - (mask0 @ values) / m0
    x_diff = (mask1 @ x) / m1 - (mask0 @ x) / m0
    return w_diff - np.einsum("rp,rp->r", slopes, x_diff)


def _adjusted_diff_rows_loop(values, x, arm_matrix, m1):
    out = np.empty(arm_matrix.shape[0])
    m = values.shape[0]
    for k in range(arm_matrix.shape[0]):
        arms = arm_matrix[k].astype(bool)
        w1, w0 = values[arms], values[~arms]
        x1, x0 = x[arms], x[~arms]
        b1, _ = _ols_slopes(x1, w1)
        b0, _ = _ols_slopes(x0, w0)
        beta = (w1.size * b1 + w0.size * b0) / m
        out[k] = w1.mean() - w0.mean() - beta @ (x1.mean(axis=0) - x0.mean(axis=0))
    return out


def _tail_counts(draws: np.ndarray, observed: float) -> tuple[int, int, int]:
    slack = _TIE_RTOL * abs(observed)
    bad = ~np.isfinite(draws)
    two = int(np.sum((np.abs(draws) >= abs(observed) - slack) | bad))
    left = int(np.sum((draws <= observed + slack) | bad))
    right = int(np.sum((draws >= observed - slack) | bad))
    return two, left, right


def _enumerated_blocks(
    scheme: ParallelScheme, cap: int, block: int = 65536
) -> Iterator[np.ndarray]:
    buf: list[np.ndarray] = []
    for a in enumerate_assignments(scheme, cap=cap):
        buf.append(a)
        if len(buf) == block:
            yield np.array(buf, dtype=np.int8)
            buf = []
    if buf:
        yield np.array(buf, dtype=np.int8)


def _build_statistic(
    records: Sequence[ClusterRecord],
    null: NullSpec,
    statistic: str,
    correction: bool,
) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    """(row evaluator, observed deviation) for one statistic and null."""
    m1 = sum(r.arm for r in records)
    observed_arms = np.array([r.arm for r in records], dtype=np.int8)

    if statistic in ("difference_in_means", "log_contrast", "covariate_adjusted"):
        l0 = impute_null_outcomes(records, null, correction=correction)
        use_adjusted = statistic == "covariate_adjusted" or (
            null.kind == "dose_response" and null.adjustment == "covariates"
        )
        if use_adjusted:
            x = np.array([r.covariates for r in records], dtype=float)
            if x.shape[1] == 0:
                raise StatisticUndefined(
                    "the covariate-adjusted statistic requires covariates"
                )
            evaluate = lambda rows: _adjusted_diff_rows(l0, x, rows, m1)
        else:
            evaluate = lambda rows: _diff_means_rows(l0, rows, m1)
        observed = float(evaluate(observed_arms[None, :])[0])
        return evaluate, observed

    if null.kind != "relative_risk":
        raise StatisticUndefined(
            f"the {statistic} statistic tests relative-risk nulls only"
        )
    if statistic == "tpf":
        fractions = np.array(
            [r.y_count / (r.y_count + r.z_count) for r in records], dtype=float
        )
        t_obs, r_obs = tpf_statistic(records)
        observed = t_obs - tpf_expected(null.value, r_obs)
        return (lambda rows: _diff_means_rows(fractions, rows, m1)), observed
    if statistic == "odds_ratio":
        y = np.array([r.y_count for r in records])
        z = np.array([r.z_count for r in records])
        observed = odds_ratio_log(records) - math.log(null.value)
        return (lambda rows: odds_ratio_permutation_draws(y, z, rows)), observed
    raise ValueError(f"unknown statistic {statistic!r}")


def permutation_test(
    records: Sequence[ClusterRecord],
    null: NullSpec,
    statistic: str = "difference_in_means",
    *,
    mode: str = "auto",
    n_draws: int = 9999,
    seed: int = 0,
    cap: int = ENUMERATION_CAP,
    auto_exact_limit: int = 100_000,
    correction: bool = False,
) -> PermutationResult:
    """Randomization test of a sharp null.

    The statistic is evaluated, as a deviation from its null-implied
    center, at the observed assignment and at every enumerated (exact
    mode) or uniformly sampled (monte_carlo mode) assignment.  The exact
    two-sided p is ``#{|T*| >= |T_obs|} / total`` with the observed
    assignment included; Monte Carlo p uses the add-one rule
    ``(1 + #{|T*| >= |T_obs|}) / (1 + n_draws)`` so p is never 0.

    Statistics: ``difference_in_means`` (arm-mean difference of the
    null-imputed control log-contrasts; alias ``log_contrast``),
    ``covariate_adjusted`` (slopes re-estimated per assignment), and,
    for relative-risk nulls only, the count-based ``tpf`` and
    ``odds_ratio`` statistics with per-cluster counts held fixed.
    """
    treated, _ = split_arms(records)
    scheme = ParallelScheme(m=len(records), m1=len(treated))
    evaluate, observed = _build_statistic(records, null, statistic, correction)

    total = scheme.total_assignments
    if mode == "auto":
        mode = "exact" if total <= auto_exact_limit else "monte_carlo"
    if mode == "exact":
        two = left = right = 0
        for block in _enumerated_blocks(scheme, cap):
            t, l, r = _tail_counts(evaluate(block), observed)
            two, left, right = two + t, left + l, right + r
        return PermutationResult(
            observed_stat=observed,
            null_draws=total,
            p_two_sided=two / total,
            p_left=left / total,
            p_right=right / total,
            mode="exact",
            statistic=statistic,
        )
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    rows = sample_assignments(scheme, n_draws, derive_rng(seed, 0xBE))
    two, left, right = _tail_counts(evaluate(rows.astype(np.int8)), observed)
    return PermutationResult(
        observed_stat=observed,
        null_draws=n_draws,
        p_two_sided=(1 + two) / (1 + n_draws),
        p_left=(1 + left) / (1 + n_draws),
        p_right=(1 + right) / (1 + n_draws),
        mode="monte_carlo",
        n_draws=n_draws,
        seed=seed,
        statistic=statistic,
    )


# --------------------------------------------------------------------- #
# Normal-approximation tests
# --------------------------------------------------------------------- #


def _two_sided_p(deviation: float, se: float, scale: float) -> tuple[float, dict]:
    """Normal p-value with explicit handling of a degenerate (zero) SE."""
    tol = 1e-12 * (1.0 + scale)
    if se <= tol:
        if abs(deviation) <= tol:
            return 1.0, {"degenerate_variance": "estimate matches the null exactly"}
        return 0.0, {"degenerate_variance": "zero SE with nonzero deviation"}
    # two-sided Normal tail: 2 * Phi(-|z|) = erfc(|z| / sqrt(2))
    return math.erfc(abs(deviation) / (se * math.sqrt(2.0))), {}


def normal_test(
    records: Sequence[ClusterRecord],
    null: NullSpec,
    method: str = "log_contrast",
    *,
    alpha: float = 0.05,
    correction: bool = False,
) -> EstimateReport:
    """z-test of a sharp null based on an estimator and its SE.

    For relative-risk nulls, ``method`` selects the log-contrast or
    covariate-adjusted estimator; the report carries the estimate, its
    Normal CI, and the two-sided p-value at the null.  For dose-response
    nulls the working outcome ``L - beta0 * dose`` is tested for zero
    arm difference, and the report's estimate is the implied
    instrumental-variable ratio.
    """
    if null.kind == "relative_risk":
        if method == "log_contrast":
            report = log_contrast_estimate(records, alpha=alpha, correction=correction)
        elif method == "covariate_adjusted":
            report, _ = covariate_adjusted_estimate(
                records, alpha=alpha, correction=correction
            )
        else:
            raise ValueError(
                f"method {method!r} does not support relative-risk normal tests"
            )
        deviation = report.log_estimate - math.log(null.value)
        p, flags = _two_sided_p(deviation, report.se_log, abs(report.log_estimate))
        report.p_value = p
        report.diagnostics.update(flags)
        report.diagnostics["null_lambda"] = null.value
        return report
    if method != "dose_response":
        raise ValueError(f"method {method!r} does not support dose-response nulls")
    return _dose_normal_report(
        records, null.value, null.adjustment, alpha=alpha, correction=correction
    )


def _dose_arrays(records: Sequence[ClusterRecord], adjustment: str, correction: bool):
    lvals = log_contrasts(records, correction)
    doses = _dose_vector(records)
    arms = np.array([r.arm for r in records], dtype=bool)
    x = (
        np.array([r.covariates for r in records], dtype=float)
        if adjustment == "covariates"
        else None
    )
    return lvals, doses, arms, x


def _dose_stat_arrays(
    lvals: np.ndarray,
    doses: np.ndarray,
    arms: np.ndarray,
    x: np.ndarray | None,
    beta0: float,
) -> tuple[float, float, float]:
    """(arm difference, SE, scale) of the working outcome L - beta0 * dose."""
    w = lvals - beta0 * doses
    w1, w0 = w[arms], w[~arms]
    if x is not None:
        x1, x0 = x[arms], x[~arms]
        b1, v1 = _ols_slopes(x1, w1)
        b0, v0 = _ols_slopes(x0, w0)
        beta = (w1.size * b1 + w0.size * b0) / w.shape[0]
        est = float(w1.mean() - w0.mean() - beta @ (x1.mean(axis=0) - x0.mean(axis=0)))
    else:
        est = float(w1.mean() - w0.mean())
        v1 = float(np.var(w1, ddof=1))
        v0 = float(np.var(w0, ddof=1))
    se = math.sqrt(v1 / w1.size + v0 / w0.size)
    scale = float(np.mean(np.abs(w)))
    return est, se, scale


def _dose_working_stat(
    records: Sequence[ClusterRecord],
    beta0: float,
    adjustment: str,
    correction: bool,
) -> tuple[float, float, float]:
    """(arm difference, SE, scale) of the working outcome L - beta0 * dose."""
    lvals, doses, arms, x = _dose_arrays(records, adjustment, correction)
    return _dose_stat_arrays(lvals, doses, arms, x, beta0)


def dose_response_pvalue(
    records: Sequence[ClusterRecord],
    beta0: float,
    *,
    adjustment: str = "none",
    correction: bool = False,
) -> float:
    """Normal-approximation p-value for the sharp null beta = beta0."""
    est, se, scale = _dose_working_stat(records, beta0, adjustment, correction)
    p, _ = _two_sided_p(est, se, scale)
    return p


def _dose_normal_report(
    records, beta0, adjustment, *, alpha, correction
) -> EstimateReport:
    est, se, scale = _dose_working_stat(records, beta0, adjustment, correction)
    doses = _dose_vector(records)
    arms = np.array([r.arm for r in records], dtype=bool)
    dd = float(doses[arms].mean() - doses[~arms].mean())
    p, flags = _two_sided_p(est, se, scale)
    diagnostics = {
        "null_beta": beta0,
        "adjustment": adjustment,
        "working_difference": est,
        "dose_arm_difference": dd,
    }
    diagnostics.update(flags)
    if abs(dd) < 1e-12:
        # instrument has no arm separation; no ratio estimate exists
        return EstimateReport(
            method="dose_response",
            log_estimate=beta0,
            se_log=se,
            ci_method="none",
            alpha=alpha,
            p_value=p,
            scale="beta",
            diagnostics=diagnostics,
        )
    ratio = beta0 + est / dd
    se_ratio = se / abs(dd)
    zq = norm.ppf(1.0 - alpha / 2.0)
    return EstimateReport(
        method="dose_response",
        log_estimate=ratio,
        se_log=se_ratio,
        ci_low=ratio - zq * se_ratio,
        ci_high=ratio + zq * se_ratio,
        ci_method="normal",
        alpha=alpha,
        p_value=p,
        scale="beta",
        diagnostics=diagnostics,
    )


# --------------------------------------------------------------------- #
# Test inversion
# --------------------------------------------------------------------- #


def _pvalue_function(
    records: Sequence[ClusterRecord],
    method: str,
    test: str,
    *,
    adjustment: str,
    mode: str,
    n_draws: int,
    seed: int,
    correction: bool,
) -> tuple[Callable[[float], float], str]:
    """p(theta0) on the search scale: log(lam0), or beta0 directly.

    Permutation-based functions share one set of re-randomized
    assignments across all theta0 (common random numbers), so the
    p-value curve is deterministic given the seed and free of
    resampling jitter.
    """
    if method in ("log_contrast", "covariate_adjusted", "tpf", "odds_ratio"):
        kind = "relative_risk"
    elif method == "dose_response":
        kind = "dose_response"
    else:
        raise ValueError(f"unknown method {method!r}")

    if test == "normal":
        if method in ("log_contrast", "covariate_adjusted"):
            if method == "log_contrast":
                report = log_contrast_estimate(records, correction=correction)
            else:
                report, _ = covariate_adjusted_estimate(records, correction=correction)

            def pfun(theta: float) -> float:
                p, _ = _two_sided_p(
                    report.log_estimate - theta, report.se_log, abs(theta)
                )
                return p

        elif method == "dose_response":
            lvals, doses, arms, x = _dose_arrays(records, adjustment, correction)

            def pfun(theta: float) -> float:
                est, se, scale = _dose_stat_arrays(lvals, doses, arms, x, theta)
                p, _ = _two_sided_p(est, se, scale)
                return p

        else:
            raise ValueError(f"method {method!r} has no Normal test")
        return pfun, kind

    if test != "permutation":
        raise ValueError(f"unknown test {test!r}")

    treated, _ = split_arms(records)
    m, m1 = len(records), len(treated)
    scheme = ParallelScheme(m=m, m1=m1)
    total = scheme.total_assignments
    use_exact = mode == "exact" or (mode == "auto" and total <= 100_000)
    if use_exact:
        rows = np.concatenate(list(_enumerated_blocks(scheme, ENUMERATION_CAP)))
        denom = total
        add_one = 0
    else:
        rows = sample_assignments(scheme, n_draws, derive_rng(seed, 0xC1)).astype(
            np.int8
        )
        denom = 1 + n_draws
        add_one = 1

    if method in ("tpf", "odds_ratio"):
        # counts held fixed: the permutation draws do not move with
        # theta, only the null-implied center of the observed statistic
        if method == "tpf":
            fractions = np.array(
                [r.y_count / (r.y_count + r.z_count) for r in records], dtype=float
            )
            t_obs, r_obs = tpf_statistic(records)
            draws = _diff_means_rows(fractions, rows, m1)
            observed_dev = lambda theta: t_obs - tpf_expected(math.exp(theta), r_obs)
        else:
            y = np.array([r.y_count for r in records])
            z = np.array([r.z_count for r in records])
            log_or = odds_ratio_log(records)
            draws = odds_ratio_permutation_draws(y, z, rows)
            observed_dev = lambda theta: log_or - theta

        def pfun(theta: float) -> float:
            two, _, _ = _tail_counts(draws, observed_dev(theta))
            return (add_one + two) / denom

        return pfun, kind

    arms_bool = np.array([r.arm for r in records], dtype=bool)
    lvals = log_contrasts(records, correction)
    x = np.array([r.covariates for r in records], dtype=float)
    doses = _dose_vector(records) if kind == "dose_response" else None
    use_adjusted = method == "covariate_adjusted" or (
        kind == "dose_response" and adjustment == "covariates"
    )
    if use_adjusted and x.shape[1] == 0:
        raise StatisticUndefined("the covariate-adjusted statistic requires covariates")
    observed_row = arms_bool.astype(np.int8)[None, :]

    def pfun(theta: float) -> float:
        if kind == "relative_risk":
            l0 = lvals - arms_bool * theta
        else:
            l0 = lvals - theta * doses
        if use_adjusted:
            draws = _adjusted_diff_rows(l0, x, rows, m1)
            obs = float(_adjusted_diff_rows(l0, x, observed_row, m1)[0])
        else:
            draws = _diff_means_rows(l0, rows, m1)
            obs = float(l0[arms_bool].mean() - l0[~arms_bool].mean())
        two, _, _ = _tail_counts(draws, obs)
        return (add_one + two) / denom

    return pfun, kind


def _default_bounds(records, method, kind, correction, adjustment):
    """(center, half_width) on the search scale from a crude estimate and SE."""
    if kind == "dose_response":
        est, se, _ = _dose_working_stat(records, 0.0, adjustment, correction)
        doses = _dose_vector(records)
        arms = np.array([r.arm for r in records], dtype=bool)
        dd = float(doses[arms].mean() - doses[~arms].mean())
        if abs(dd) < 1e-12:
            raise ConstantDose("doses do not separate the arms")
        return est / dd, 10.0 * max(se / abs(dd), 1e-6)
    base = log_contrast_estimate(records, correction=correction)
    if method == "covariate_adjusted":
        report, _ = covariate_adjusted_estimate(records, correction=correction)
        return report.log_estimate, 10.0 * max(report.se_log, 1e-6)
    if method == "tpf":
        return tpf_estimate(records).log_estimate, 10.0 * max(base.se_log, 1e-6)
    return base.log_estimate, 10.0 * max(base.se_log, 1e-6)


def invert_ci(
    records: Sequence[ClusterRecord],
    method: str = "log_contrast",
    *,
    alpha: float = 0.05,
    test: str = "normal",
    search: str = "bisection",
    bounds: tuple[float, float] | None = None,
    grid_points: int = 2001,
    tol: float = 1e-6,
    adjustment: str = "none",
    mode: str = "auto",
    n_draws: int = 2000,
    seed: int = 0,
    correction: bool = False,
) -> tuple[float, float, dict]:
    """Confidence interval as the set of nulls not rejected at level alpha.

    Searches on log(lam0) for relative-risk methods (the returned
    endpoints are exponentiated to the lam scale) and on beta0 for
    dose-response.  ``search="grid"`` reports the outermost non-rejected
    points of an evenly spaced grid; ``search="bisection"`` refines each
    endpoint to ``tol`` after a grid pre-scan that also checks that the
    p-value curve is unimodal (if it is not, the grid envelope is
    returned with a warning).

    With user-supplied ``bounds`` (on the search scale) no widening is
    attempted; default bounds are estimate +- 10 SE, widened adaptively
    to +- 50 SE while an endpoint remains non-rejected.
    """
    pfun, kind = _pvalue_function(
        records,
        method,
        test,
        adjustment=adjustment,
        mode=mode,
        n_draws=n_draws,
        seed=seed,
        correction=correction,
    )
    diagnostics: dict = {"method": method, "test": test, "alpha": alpha}

    if bounds is not None:
        lo, hi = float(bounds[0]), float(bounds[1])
        widen_allowed = False
    else:
        center, half = _default_bounds(records, method, kind, correction, adjustment)
        max_half = 5.0 * half  # 10 SE widened up to 50 SE
        while (pfun(center - half) > alpha or pfun(center + half) > alpha):
            if half >= max_half - 1e-15:
                raise NoNonRejectedPoint(
                    "confidence endpoint not bracketed within 50 SE of the estimate"
                )
            half = min(2.0 * half, max_half)
        lo, hi = center - half, center + half
        widen_allowed = True

    theta_lo, theta_hi = _invert_pfun(
        pfun, lo, hi, alpha,
        search=search,
        grid_points=grid_points,
        tol=tol,
        widen_allowed=widen_allowed,
        diagnostics=diagnostics,
    )
    if kind == "relative_risk":
        return math.exp(theta_lo), math.exp(theta_hi), diagnostics
    return theta_lo, theta_hi, diagnostics


def _invert_pfun(
    pfun, lo, hi, alpha, *, search, grid_points, tol, widen_allowed, diagnostics
) -> tuple[float, float]:
    """Endpoints of {theta in [lo, hi] : pfun(theta) > alpha}."""
    n_scan = grid_points if search == "grid" else max(201, min(grid_points, 401))
    grid = np.linspace(lo, hi, n_scan)
    pvals = np.array([pfun(t) for t in grid])
    accepted = pvals > alpha
    if not accepted.any():
        raise NoNonRejectedPoint(
            f"no parameter value in [{lo:.6g}, {hi:.6g}] has p > {alpha}"
        )
    idx = np.nonzero(accepted)[0]
    left_idx, right_idx = int(idx[0]), int(idx[-1])
    contiguous = bool(np.all(accepted[left_idx : right_idx + 1]))
    diagnostics["grid_points"] = n_scan
    diagnostics["p_max"] = float(pvals.max())

    if not widen_allowed and (left_idx == 0 or right_idx == n_scan - 1):
        raise NoNonRejectedPoint(
            "confidence region reaches the supplied bounds; widen them"
        )

    if search == "grid" or not contiguous:
        if not contiguous:
            warnings.warn(
                "p-value curve is not unimodal on the scan grid; reporting "
                "the grid envelope of non-rejected points",
                RuntimeWarning,
            )
            diagnostics["non_unimodal"] = True
        return float(grid[left_idx]), float(grid[right_idx])
    if search == "bisection":
        theta_lo = _bisect_boundary(pfun, alpha, grid[left_idx - 1], grid[left_idx], tol)
        theta_hi = _bisect_boundary(pfun, alpha, grid[right_idx + 1], grid[right_idx], tol)
        return theta_lo, theta_hi
    raise ValueError(f"unknown search {search!r}")


def _bisect_boundary(pfun, alpha, rejected, accepted, tol):
    """Boundary of {p > alpha} between a rejected and an accepted point."""
    a, b = float(rejected), float(accepted)
    while abs(b - a) > tol:
        mid = 0.5 * (a + b)
        if pfun(mid) > alpha:
            b = mid
        else:
            a = mid
    return b


# --------------------------------------------------------------------- #
# Dose-response point estimation
# --------------------------------------------------------------------- #


def dose_response_estimate(
    records: Sequence[ClusterRecord],
    *,
    adjustment: str = "auto",
    alpha: float = 0.05,
    test: str = "normal",
    ci_search: str = "bisection",
    mode: str = "auto",
    n_draws: int = 2000,
    seed: int = 0,
    correction: bool = False,
) -> EstimateReport:
    """Dose coefficient estimated at the location of the maximized p-value.

    A deterministic grid scan brackets the p-value peak and
    golden-section search refines it; the CI comes from test inversion.
    Interpretation is limited to the observed dose range, which is
    recorded in the diagnostics.
    """
    doses = _dose_vector(records)
    if float(doses.max() - doses.min()) <= 0.0:
        raise ConstantDose("all clusters share one dose value")
    if adjustment == "auto":
        adjustment = "covariates" if len(records[0].covariates) > 0 else "none"
    split_arms(records)
    lvals = log_contrasts(records, correction)

    # An exact linear relation L = a + b * dose makes the working outcome
    # degenerate at beta0 = b; detect it directly instead of hunting a
    # measure-zero p-value spike.
    design = np.column_stack([np.ones(len(records)), doses])
    coef, _, _, _ = np.linalg.lstsq(design, lvals, rcond=None)
    resid = lvals - design @ coef
    scale = float(np.sum((lvals - lvals.mean()) ** 2))
    if float(resid @ resid) <= 1e-20 * max(1.0, scale):
        beta_hat = float(coef[1])
        return EstimateReport(
            method="dose_response",
            log_estimate=beta_hat,
            se_log=0.0,
            ci_low=beta_hat,
            ci_high=beta_hat,
            ci_method="degenerate",
            alpha=alpha,
            p_value=1.0,
            scale="beta",
            diagnostics={
                "adjustment": adjustment,
                "dose_range": [float(doses.min()), float(doses.max())],
                "note": "log-contrasts are an exact linear function of dose",
            },
        )

    if test == "normal":
        arrs = _dose_arrays(records, adjustment, correction)

        def pfun(b0: float) -> float:
            est, se, scale = _dose_stat_arrays(*arrs, b0)
            p, _ = _two_sided_p(est, se, scale)
            return p

    else:
        pfun, _ = _pvalue_function(
            records,
            "dose_response",
            "permutation",
            adjustment=adjustment,
            mode=mode,
            n_draws=n_draws,
            seed=seed,
            correction=correction,
        )

    center, half = _default_bounds(
        records, "dose_response", "dose_response", correction, adjustment
    )
    grid = np.linspace(center - half, center + half, 201)
    best = 0
    for _ in range(4):
        grid = np.linspace(center - half, center + half, 201)
        pvals = np.array([pfun(b) for b in grid])
        best = int(np.argmax(pvals))
        if 0 < best < len(grid) - 1:
            break
        half *= 2.0  # peak at the scan boundary: widen and rescan
    if 0 < best < len(grid) - 1:
        beta_hat = _golden_max(pfun, grid[best - 1], grid[best + 1])
    else:
        beta_hat = float(grid[best])
    p_max = pfun(beta_hat)

    ci_low, ci_high, inv_diag = invert_ci(
        records,
        "dose_response",
        alpha=alpha,
        test=test,
        search=ci_search,
        adjustment=adjustment,
        mode=mode,
        n_draws=n_draws,
        seed=seed,
        correction=correction,
    )
    est_w, se_w, _ = _dose_working_stat(records, beta_hat, adjustment, correction)
    arms = np.array([r.arm for r in records], dtype=bool)
    dd = float(doses[arms].mean() - doses[~arms].mean())
    return EstimateReport(
        method="dose_response",
        log_estimate=float(beta_hat),
        se_log=se_w / abs(dd) if abs(dd) > 1e-12 else None,
        ci_low=ci_low,
        ci_high=ci_high,
        ci_method="test_inversion",
        alpha=alpha,
        p_value=float(p_max),
        scale="beta",
        diagnostics={
            "adjustment": adjustment,
            "test": test,
            "dose_range": [float(doses.min()), float(doses.max())],
            "p_max": float(p_max),
            **inv_diag,
        },
    )


def _golden_max(pfun, lo, hi, tol: float = 1e-9):
    """Golden-section maximization of pfun on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = pfun(x1), pfun(x2)
    while hi - lo > tol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = pfun(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = pfun(x1)
    return 0.5 * (lo + hi)

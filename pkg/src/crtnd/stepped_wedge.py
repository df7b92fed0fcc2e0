"""Stepped-wedge estimation: weighted per-period contrasts and covariance.

At each analysis period t (those t in 1..T-1 where some but not all
clusters are under intervention) the treated-minus-control mean of the
period's log-contrasts is unbiased for ``log(lam)``; the estimator is a
weighted sum of these per-period differences with weights summing to 1.

Its randomization covariance has entries

    Sigma[t1, t2] = m / (m_{max(t1,t2)} (m - m_{min(t1,t2)})) * S[t1, t2]

where ``S`` is the finite-population covariance of the control
log-contrasts across clusters and ``m_t`` counts clusters under
intervention at t.  This scaling is validated against a full
enumeration oracle in the test suite.  A second convention that scales
the upper-triangle entries by ``m / (m_{t2-1} (m - m_{t1}))`` instead is
available behind ``convention="printed"`` for sensitivity comparisons.

``S`` entries are estimated by the sample covariance of the observed
log-contrasts within whichever of three groups sharing one treatment
pattern over (t1, t2) is largest: treated by t1, switching between t1
and t2, or untreated at t2.  Constant treatment shifts cancel within a
group, so each group's sample covariance estimates the same S entry.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ENUMERATION_CAP,
    Panel,
    SteppedWedgeScheme,
    derive_rng,
    enumerate_assignments,
    sample_assignments,
)
from .errors import ArmTooSmall, GroupTooSmall, SingularCovariance
from .estimators import EstimateReport, normal_ci
from .inference import PermutationResult, _tail_counts

__all__ = [
    "SWWeights",
    "SWCovariance",
    "sw_log_contrast",
    "sw_covariance_estimate",
    "sw_oracle_covariance",
    "sw_null_covariance",
    "optimal_weights",
    "sw_permutation_test",
]


@dataclass(frozen=True)
class SWWeights:
    """Per-analysis-period weights, summing to 1 (components may be negative)."""

    w: tuple[float, ...]
    kind: str  # "equal" | "optimal_oracle" | "optimal_plugin" | "custom"
    periods: tuple[int, ...]

    def __post_init__(self):
        if len(self.w) != len(self.periods):
            raise ValueError("one weight per analysis period is required")
        if abs(sum(self.w) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.w)!r}")


@dataclass(frozen=True)
class SWCovariance:
    """Covariance of the per-period differences over analysis periods.

    ``sigma`` is the scaled covariance matrix, ``s_values`` the raw
    cross-period (co)variance entries it was built from (NaN where a
    formula other than scaled-S was used, e.g. the estimated diagonal),
    ``group_sizes`` the per-period treated counts m_t.
    """

    sigma: np.ndarray
    s_values: np.ndarray
    group_sizes: tuple[int, ...]
    periods: tuple[int, ...]
    provenance: str  # "oracle" | "estimated" | "null_exact" | "permutation"
    convention: str = "canonical"

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim != 2 or sig.shape[0] != sig.shape[1]:
            raise ValueError("sigma must be square")
        if sig.shape[0] != len(self.periods):
            raise ValueError("sigma dimension must match analysis periods")
        if not np.allclose(sig, sig.T, atol=1e-12, rtol=1e-9):
            raise ValueError("sigma must be symmetric")
        if np.any(np.diag(sig) < -1e-12):
            raise ValueError("sigma diagonal entries must be nonnegative")
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)


def _scale(m: int, m_t: dict[int, int], t1: int, t2: int, convention: str) -> float:
    lo, hi = min(t1, t2), max(t1, t2)
    if convention == "canonical":
        return m / (m_t[hi] * (m - m_t[lo]))
    if convention == "printed":
        if t1 == t2:
            return m / (m_t[t1] * (m - m_t[t1]))
        denom = m_t.get(hi - 1, 0)
        if denom == 0:
            raise SingularCovariance(
                f"printed scaling needs m_{hi - 1} > 0 for entry ({t1},{t2})"
            )
        return m / (denom * (m - m_t[lo]))
    raise ValueError(f"unknown convention {convention!r}")


def _panel_design(panel: Panel):
    """(analysis periods, m_t map, dropped periods) from realized starts."""
    m = panel.m
    n_periods = panel.n_periods
    m_t = {
        t: sum(1 for a in panel.start_periods if a <= t)
        for t in range(1, n_periods + 1)
    }
    periods = tuple(t for t in range(1, n_periods) if 1 <= m_t[t] <= m - 1)
    dropped = tuple(t for t in range(1, n_periods) if t not in periods)
    return periods, m_t, dropped


def _warn_dropped(dropped: tuple[int, ...]) -> None:
    if dropped:
        warnings.warn(
            "some periods in 1..T-1 have an empty treated or control group "
            "and are excluded from the analysis",
            RuntimeWarning,
        )


def _period_differences(
    lmat: np.ndarray, start: np.ndarray, periods: Sequence[int], m_t: dict[int, int]
) -> np.ndarray:
    m = lmat.shape[0]
    out = np.empty(len(periods))
    for k, t in enumerate(periods):
        treated = start <= t
        out[k] = lmat[treated, t - 1].mean() - lmat[~treated, t - 1].mean()
    return out


def sw_covariance_estimate(
    panel: Panel,
    *,
    convention: str = "canonical",
    correction: bool = False,
) -> SWCovariance:
    """Plug-in covariance of the per-period differences from observed data.

    Diagonal entries use the per-period per-arm variance construction
    ``s1^2/m_t + s0^2/(m - m_t)``, matching the parallel-arm estimator.
    Off-diagonal entries scale the largest-group sample covariance (the
    three-case rule; ties break in the order treated-by-t1, switchers,
    untreated-at-t2).
    """
    periods, m_t, dropped = _panel_design(panel)
    _warn_dropped(dropped)
    m = panel.m
    lmat = panel.log_contrast_matrix(correction)
    start = np.asarray(panel.start_periods)
    k = len(periods)
    sigma = np.zeros((k, k))
    s_values = np.full((k, k), np.nan)

    for i, t in enumerate(periods):
        treated = start <= t
        n1, n0 = int(treated.sum()), int((~treated).sum())
        if n1 < 2 or n0 < 2:
            raise ArmTooSmall(
                f"period {t}: variance estimation needs >= 2 clusters per arm "
                f"(treated={n1}, control={n0})"
            )
        v1 = float(np.var(lmat[treated, t - 1], ddof=1))
        v0 = float(np.var(lmat[~treated, t - 1], ddof=1))
        sigma[i, i] = v1 / n1 + v0 / n0

    for i, t1 in enumerate(periods):
        for j, t2 in enumerate(periods):
            if t2 <= t1:
                continue
            groups = (
                ("treated_by_t1", start <= t1),
                ("switchers", (start > t1) & (start <= t2)),
                ("untreated_at_t2", start > t2),
            )
            sizes = [int(mask.sum()) for _, mask in groups]
            name, mask = groups[int(np.argmax(sizes))]
            if mask.sum() < 2:
                raise GroupTooSmall(t1, t2, name, int(mask.sum()))
            a = lmat[mask, t1 - 1]
            b = lmat[mask, t2 - 1]
            s_hat = float(np.cov(a, b, ddof=1)[0, 1])
            s_values[i, j] = s_values[j, i] = s_hat
            entry = _scale(m, m_t, t1, t2, convention) * s_hat
            sigma[i, j] = sigma[j, i] = entry

    return SWCovariance(
        sigma=sigma,
        s_values=s_values,
        group_sizes=tuple(m_t[t] for t in periods),
        periods=periods,
        provenance="estimated",
        convention=convention,
    )


def sw_oracle_covariance(
    l0: np.ndarray,
    scheme: SteppedWedgeScheme,
    *,
    convention: str = "canonical",
) -> SWCovariance:
    """Exact covariance from known control log-contrasts (m x T matrix)."""
    l0 = np.asarray(l0, dtype=float)
    if l0.shape != (scheme.m, scheme.n_periods):
        raise ValueError(
            f"l0 must have shape ({scheme.m}, {scheme.n_periods}), got {l0.shape}"
        )
    periods = scheme.analysis_periods
    m_t = {t: scheme.m_t(t) for t in range(1, scheme.n_periods + 1)}
    k = len(periods)
    cols = l0[:, [t - 1 for t in periods]]
    s_full = np.cov(cols, rowvar=False, ddof=1).reshape(k, k)
    sigma = np.empty((k, k))
    for i, t1 in enumerate(periods):
        for j, t2 in enumerate(periods):
            sigma[i, j] = _scale(scheme.m, m_t, t1, t2, convention) * s_full[i, j]
    return SWCovariance(
        sigma=sigma,
        s_values=s_full,
        group_sizes=tuple(m_t[t] for t in periods),
        periods=periods,
        provenance="oracle",
        convention=convention,
    )


def sw_null_covariance(
    panel: Panel,
    lam0: float,
    *,
    convention: str = "canonical",
    correction: bool = False,
) -> SWCovariance:
    """Exact covariance under a sharp null: impute L(0), then use all clusters.

    Under ``lam = lam0`` every control log-contrast is recoverable as
    ``L - log(lam0)`` on treated cells, so S needs no group selection.
    """
    periods, m_t, dropped = _panel_design(panel)
    _warn_dropped(dropped)
    lmat = panel.log_contrast_matrix(correction)
    start = np.asarray(panel.start_periods)
    tgrid = np.arange(1, panel.n_periods + 1)
    treated = tgrid[None, :] >= start[:, None]
    l0 = lmat - math.log(lam0) * treated
    k = len(periods)
    cols = l0[:, [t - 1 for t in periods]]
    s_full = np.cov(cols, rowvar=False, ddof=1).reshape(k, k)
    sigma = np.empty((k, k))
    for i, t1 in enumerate(periods):
        for j, t2 in enumerate(periods):
            sigma[i, j] = _scale(panel.m, m_t, t1, t2, convention) * s_full[i, j]
    return SWCovariance(
        sigma=sigma,
        s_values=s_full,
        group_sizes=tuple(m_t[t] for t in periods),
        periods=periods,
        provenance="null_exact",
        convention=convention,
    )


def optimal_weights(
    sigma: SWCovariance | np.ndarray,
    *,
    cond_threshold: float = 1e10,
    periods: tuple[int, ...] | None = None,
    kind: str = "optimal_plugin",
) -> SWWeights:
    """Variance-minimizing weights: Sigma^{-1} 1 / (1' Sigma^{-1} 1).

    Raises :class:`SingularCovariance` when the matrix condition number
    exceeds ``cond_threshold``; callers usually fall back to equal
    weights with a warning.
    """
    if isinstance(sigma, SWCovariance):
        mat = sigma.sigma
        periods = sigma.periods
    else:
        mat = np.asarray(sigma, dtype=float)
        if periods is None:
            periods = tuple(range(1, mat.shape[0] + 1))
    if mat.shape[0] == 0:
        raise ValueError("empty covariance matrix")
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > cond_threshold:
        raise SingularCovariance(
            f"covariance condition number {cond:.3g} exceeds {cond_threshold:.3g}"
        )
    ones = np.ones(mat.shape[0])
    x = np.linalg.solve(mat, ones)
    w = x / (ones @ x)
    return SWWeights(w=tuple(float(v) for v in w), kind=kind, periods=tuple(periods))


def equal_weights(periods: Sequence[int]) -> SWWeights:
    k = len(periods)
    return SWWeights(w=(1.0 / k,) * k, kind="equal", periods=tuple(periods))


def _resolve_weights(
    weights, periods: tuple[int, ...], covariance: SWCovariance | None
) -> tuple[SWWeights, list[str]]:
    notes: list[str] = []
    if weights is None or weights == "equal":
        return equal_weights(periods), notes
    if weights == "optimal":
        if covariance is None:
            raise ValueError("optimal weights need a covariance; none was supplied")
        try:
            return optimal_weights(covariance), notes
        except SingularCovariance as exc:
            warnings.warn(
                f"optimal weights unavailable ({exc}); falling back to equal weights",
                RuntimeWarning,
            )
            notes.append("optimal-weight fallback: equal weights used")
            return equal_weights(periods), notes
    if isinstance(weights, SWWeights):
        if weights.periods != periods:
            raise ValueError(
                f"weights are for periods {weights.periods}, panel analysis "
                f"periods are {periods}"
            )
        return weights, notes
    w = tuple(float(v) for v in weights)
    return SWWeights(w=w, kind="custom", periods=periods), notes


def sw_log_contrast(
    panel: Panel,
    weights="equal",
    *,
    covariance: SWCovariance | None = None,
    estimate_covariance: bool = True,
    convention: str = "canonical",
    alpha: float = 0.05,
    correction: bool = False,
) -> EstimateReport:
    """Weighted per-period log-contrast difference for a stepped wedge.

    ``weights`` may be "equal", "optimal" (computed from ``covariance``
    if given, else from the plug-in estimate, with an equal-weight
    fallback on singularity), an :class:`SWWeights`, or a bare vector
    over the analysis periods.  The SE is ``sqrt(w' Sigma_hat w)`` using
    ``covariance`` when supplied, else the plug-in estimate; pass
    ``estimate_covariance=False`` to skip SE computation entirely.
    """
    periods, m_t, dropped = _panel_design(panel)
    _warn_dropped(dropped)
    lmat = panel.log_contrast_matrix(correction)
    start = np.asarray(panel.start_periods)
    diffs = _period_differences(lmat, start, periods, m_t)

    cov = covariance
    if cov is None and (estimate_covariance or weights == "optimal"):
        cov = sw_covariance_estimate(
            panel, convention=convention, correction=correction
        )
    if cov is not None and cov.periods != periods:
        raise ValueError(
            f"covariance is for periods {cov.periods}, panel analysis periods "
            f"are {periods}"
        )
    wts, notes = _resolve_weights(weights, periods, cov)
    w = np.asarray(wts.w)
    est = float(w @ diffs)

    se = ci_low = ci_high = None
    if cov is not None:
        var = float(w @ cov.sigma @ w)
        se = math.sqrt(max(var, 0.0))
        ci_low, ci_high = normal_ci(est, se, alpha)
    diagnostics = {
        "weights": list(wts.w),
        "weight_kind": wts.kind,
        "analysis_periods": list(periods),
        "dropped_periods": list(dropped),
        "period_differences": diffs.tolist(),
        "convention": convention,
    }
    if cov is not None:
        diagnostics["covariance_provenance"] = cov.provenance
    if notes:
        diagnostics["notes"] = notes
    return EstimateReport(
        method="sw_log_contrast",
        log_estimate=est,
        se_log=se,
        ci_low=ci_low,
        ci_high=ci_high,
        ci_method="normal" if se is not None else "none",
        alpha=alpha,
        diagnostics=diagnostics,
    )


def sw_permutation_test(
    panel: Panel,
    lam0: float,
    weights="equal",
    *,
    mode: str = "auto",
    n_draws: int = 9999,
    seed: int = 0,
    cap: int = ENUMERATION_CAP,
    auto_exact_limit: int = 100_000,
    correction: bool = False,
    convention: str = "canonical",
) -> PermutationResult:
    """Randomization test of lam = lam0 using the weighted SW statistic.

    Control log-contrasts are imputed under the null and the weighted
    per-period difference statistic is evaluated over re-randomized
    start-period vectors drawn from the realized design's support.
    Weights are held fixed across re-randomizations; "optimal" weights
    are computed exactly from the null-imputed covariance.
    """
    if lam0 <= 0:
        raise ValueError(f"lam0 must be > 0, got {lam0}")
    periods, m_t, dropped = _panel_design(panel)
    _warn_dropped(dropped)
    m = panel.m
    lmat = panel.log_contrast_matrix(correction)
    start = np.asarray(panel.start_periods)
    tgrid = np.arange(1, panel.n_periods + 1)
    treated = tgrid[None, :] >= start[:, None]
    l0 = lmat - math.log(lam0) * treated

    if weights == "optimal":
        cov = sw_null_covariance(panel, lam0, convention=convention,
                                 correction=correction)
        try:
            wts = optimal_weights(cov, kind="optimal_oracle")
        except SingularCovariance:
            warnings.warn(
                "null covariance is singular; using equal weights",
                RuntimeWarning,
            )
            wts = equal_weights(periods)
    else:
        wts, _ = _resolve_weights(weights, periods, None)
    w = np.asarray(wts.w)

    # Start labels beyond the observed window (never treated in-window)
    # are one more exchangeable category in the randomization.
    label_max = max(max(panel.start_periods), panel.n_periods)
    q = tuple(
        sum(1 for a in panel.start_periods if a == t)
        for t in range(1, label_max + 1)
    )
    scheme = SteppedWedgeScheme(m=m, q=q)

    def evaluate(start_rows: np.ndarray) -> np.ndarray:
        # weighted sum over periods of diff-in-means of l0[:, t-1]
        out = np.zeros(start_rows.shape[0])
        for k, t in enumerate(periods):
            mask = start_rows <= t
            col = l0[:, t - 1]
            n1 = m_t[t]
            sums = mask @ col
            out += w[k] * (sums / n1 - (col.sum() - sums) / (m - n1))
        return out

    observed = float(evaluate(start[None, :])[0])
    total = scheme.total_assignments
    if mode == "auto":
        mode = "exact" if total <= auto_exact_limit else "monte_carlo"
    if mode == "exact":
        two = left = right = 0
        buf: list[np.ndarray] = []
        for a in enumerate_assignments(scheme, cap=cap):
            buf.append(a)
            if len(buf) == 65536:
                t_, l_, r_ = _tail_counts(evaluate(np.array(buf)), observed)
                two, left, right = two + t_, left + l_, right + r_
                buf = []
        if buf:
            t_, l_, r_ = _tail_counts(evaluate(np.array(buf)), observed)
            two, left, right = two + t_, left + l_, right + r_
        return PermutationResult(
            observed_stat=observed,
            null_draws=total,
            p_two_sided=two / total,
            p_left=left / total,
            p_right=right / total,
            mode="exact",
            statistic="sw_log_contrast",
        )
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    rows = sample_assignments(scheme, n_draws, derive_rng(seed, 0x5E))
    two, left, right = _tail_counts(evaluate(rows), observed)
    return PermutationResult(
        observed_stat=observed,
        null_draws=n_draws,
        p_two_sided=(1 + two) / (1 + n_draws),
        p_left=(1 + left) / (1 + n_draws),
        p_right=(1 + right) / (1 + n_draws),
        mode="monte_carlo",
        n_draws=n_draws,
        seed=seed,
        statistic="sw_log_contrast",
    )

"""Margin-ratio law for the one-step gradient-descent linear classifier on T1.

For ``w = sum_i y_i x_i`` the squared ratio between the margin along the
discriminative direction and the margin in an S-dimensional subspace
orthogonal to it is ``xi^2 ~ sigma^2 / (N eps^2) * chi^2_S``, independent of
the observation point.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attacks import linear_margin
from .datasets import T1Params, gen_t1
from .models import linear_onestep
from .subspace import Subspace, random_rotation

GAMMA_TOL = 1e-10
_MAX_TERMS = 10_000


@dataclass(frozen=True)
class XiLawParams:
    n_samples: int = 10000
    epsilon: float = 5.0
    sigma: float = 1.0
    subspace_dim: int = 3

    def __post_init__(self):
        if self.n_samples < 1 or self.epsilon <= 0 or self.sigma <= 0 or self.subspace_dim < 1:
            raise ValueError("xi^2 law needs positive N, epsilon, sigma and S")


def xi2_law(params: XiLawParams) -> dict:
    """Scale ``sigma^2/(N eps^2)``, Wilson-Hilferty median and exact variance of xi^2."""
    scale = params.sigma**2 / (params.n_samples * params.epsilon**2)
    s = params.subspace_dim
    return {
        "scale": scale,
        "median": scale * s * (1.0 - 2.0 / (9.0 * s)) ** 3,
        "variance": 2.0 * params.sigma**4 / (params.n_samples**2 * params.epsilon**4) * s,
    }


@dataclass
class Xi2Sample:
    values: np.ndarray
    n_discarded: int
    params: dict


def xi2_empirical(t1: T1Params, S: int, reps: int, seed: int = 0, observations: int = 1) -> Xi2Sample:
    """Monte-Carlo draws of xi^2, one fresh T1 training set per repetition.

    Each repetition builds the one-step classifier, picks a random S-dimensional
    subspace inside ``span{u1}^perp`` through the stored rotation, and takes the
    squared margin ratio at fresh observation points from the same law. With
    ``observations > 1`` every point must give the same value; a mismatch raises.
    Repetitions with all labels equal are discarded.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not 1 <= S <= t1.dim - 1:
        raise ValueError(f"S must be in [1, {t1.dim - 1}]")
    children = np.random.SeedSequence(seed).spawn(reps)
    values, discarded = [], 0
    for child in children:
        rep_seed, sub_seed, obs_seed = (int(v) for v in child.generate_state(3))
        ds = gen_t1(T1Params(t1.epsilon, t1.sigma, t1.n_samples, t1.dim, rep_seed))
        if np.all(ds.labels == ds.labels[0]):
            discarded += 1
            continue
        model = linear_onestep(ds)
        w, b = model.weights[0][:, 0], model.biases[0][0]
        u = ds.rotation
        along = Subspace(u[:, :1], "u1")
        inner = random_rotation(t1.dim - 1, sub_seed)[:, :S]
        orth = Subspace(u[:, 1:] @ inner, "S_orth")
        obs = gen_t1(T1Params(t1.epsilon, t1.sigma, observations, t1.dim, obs_seed), rotation=u).features
        if t1.sigma == 0:
            # w has no component off u1: the orthogonal margin is infinite and xi^2 = 0
            values.append(0.0)
            continue
        per_obs = [linear_margin(w, b, x, along) ** 2 / linear_margin(w, b, x, orth) ** 2 for x in obs]
        if observations > 1 and np.ptp(per_obs) > 1e-10 * max(abs(per_obs[0]), 1e-300):
            raise AssertionError(f"xi^2 depends on the observation point: {per_obs}")
        values.append(per_obs[0])
    return Xi2Sample(np.array(values), discarded, {"t1": asdict(t1), "S": S, "reps": reps, "seed": seed})


# --- chi-squared CDF -----------------------------------------------------------------

def regularized_lower_gamma(a: float, x: float) -> float:
    """``P(a, x) = gamma(a, x) / Gamma(a)``; power series for ``x < a + 1``, continued fraction otherwise."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    log_prefix = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(_MAX_TERMS):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * GAMMA_TOL * 1e-3:
                break
        return min(1.0, total * math.exp(log_prefix))
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_TOL * 1e-3:
            break
    return max(0.0, 1.0 - math.exp(log_prefix) * h)


def chi2_cdf(x, df: int):
    """Chi-squared CDF, ``P(df/2, x/2)``; vectorized over x."""
    xs = np.asarray(x, dtype=float)
    out = np.array([regularized_lower_gamma(df / 2.0, v / 2.0) for v in xs.ravel()])
    return out.reshape(xs.shape) if xs.ndim else float(out[0])


def ks_statistic(sample, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance between the empirical CDF of ``sample`` and ``cdf``."""
    v = np.sort(np.asarray(sample, dtype=float))
    n = v.size
    if n == 0:
        raise ValueError("empty sample")
    f = np.asarray(cdf(v), dtype=float)
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def distribution_compare(sample, reference_scale: float, S: int, threshold: float = 0.08) -> dict:
    """KS test of ``sample / reference_scale`` against chi^2_S."""
    stat = ks_statistic(np.asarray(sample, dtype=float) / reference_scale, lambda v: chi2_cdf(v, S))
    return {"ks_statistic": stat, "threshold": threshold, "pass": bool(stat <= threshold)}


def theory_report(t1: T1Params, S: int, reps: int, seed: int = 0, threshold: float = 0.08,
                  reference_epsilon: float | None = None, median_rtol: float = 0.2,
                  return_sample: bool = False) -> dict:
    """Closed form, Monte-Carlo moments and KS verdict in one JSON-ready dict.

    ``reference_epsilon`` lets the reference law use a different feature size
    than the data (a deliberately mis-specified check). ``return_sample`` adds
    the raw xi^2 values under ``"sample"``.
    """
    sample = xi2_empirical(t1, S, reps, seed)
    report = {"sample": sample.values} if return_sample else {}
    report.update({"params": {"t1": asdict(t1), "S": S, "reps": reps, "seed": seed, "threshold": threshold},
                   "n_discarded": sample.n_discarded})
    if t1.sigma == 0:
        report.update({"degenerate": True, "closed_form": None,
                       "empirical": {"median": float(np.median(sample.values)),
                                     "variance": float(np.var(sample.values))},
                       "ks_statistic": None, "pass": bool(np.all(sample.values == 0.0))})
        return report
    ref_eps = t1.epsilon if reference_epsilon is None else reference_epsilon
    law = xi2_law(XiLawParams(t1.n_samples, ref_eps, t1.sigma, S))
    cmp = distribution_compare(sample.values, law["scale"], S, threshold)
    emp_median = float(np.median(sample.values))
    median_ok = abs(emp_median - law["median"]) <= median_rtol * law["median"]
    report.update({
        "degenerate": False,
        "reference_epsilon": ref_eps,
        "closed_form": law,
        "empirical": {"median": emp_median, "variance": float(np.var(sample.values, ddof=1)) if sample.values.size > 1 else 0.0},
        "median_within_tolerance": bool(median_ok),
        "ks_statistic": cmp["ks_statistic"],
        "pass": bool(cmp["pass"] and median_ok),
    })
    return report

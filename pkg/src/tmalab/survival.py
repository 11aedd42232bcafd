"""Survival analysis: Kaplan-Meier curves, the two-group log-rank test,
and parametric Weibull proportional-hazards regression.

Parametrization note: the Weibull survival function used throughout is
S(t | x) = exp(-(t**alpha / lam) * exp(x @ beta)), so lam corresponds to
the textbook scale parameter raised to the power alpha. The hazard is
(alpha / lam) * t**(alpha - 1) * exp(x @ beta).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


# ---------------------------------------------------------------------------
# Kaplan-Meier


@dataclass
class KaplanMeierCurve:
    """Step estimate of a survival function.

    times holds the distinct event times in increasing order; survival,
    at_risk and deaths are aligned with it. Censored follow-up shrinks the
    risk sets but contributes no step.
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    deaths: np.ndarray

    def survival_at(self, t: float) -> float:
        """Right-continuous evaluation: the product over event times <= t."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def kaplan_meier(records) -> KaplanMeierCurve:
    """Product-limit estimate from survival records.

    A censored time tied with an event time counts as at risk for that
    event (censoring is taken to happen just after the event).
    """
    if not records:
        raise ValueError("no survival records")
    t = np.array([r.time_months for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.int64)
    event_times = np.unique(t[e == 1])
    times, survival, at_risk, deaths = [], [], [], []
    s = 1.0
    for tj in event_times:
        r = int((t >= tj).sum())
        d = int(((t == tj) & (e == 1)).sum())
        s *= 1.0 - d / r
        times.append(tj)
        survival.append(s)
        at_risk.append(r)
        deaths.append(d)
    return KaplanMeierCurve(
        times=np.array(times),
        survival=np.array(survival),
        at_risk=np.array(at_risk, dtype=np.int64),
        deaths=np.array(deaths, dtype=np.int64),
    )


def save_km_csv(curve: KaplanMeierCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "survival", "at_risk", "deaths"])
        for t, s, r, d in zip(curve.times, curve.survival, curve.at_risk, curve.deaths):
            writer.writerow([repr(float(t)), repr(float(s)), int(r), int(d)])


# ---------------------------------------------------------------------------
# Log-rank test


def _gamma_series_p(a, x):
    # Lower regularized incomplete gamma by its power series.
    ap = a
    total = term = 1.0 / a
    for _ in range(500):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _gamma_cf_q(a, x):
    # Upper regularized incomplete gamma by modified Lentz continued
    # fraction; converges fast for x >= a + 1.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_upper_gamma(a: float, x: float) -> float:
    """Q(a, x), the normalized upper incomplete gamma function.

    Implemented here so no statistics dependency is needed for p-values;
    accurate to well below 1e-10 for the chi-square argument range.
    """
    if a <= 0 or x < 0:
        raise ValueError("require a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series_p(a, x)
    return _gamma_cf_q(a, x)


def chi2_tail_1df(x: float) -> float:
    """Upper tail probability of the chi-square distribution with one
    degree of freedom."""
    return regularized_upper_gamma(0.5, x / 2.0)


@dataclass
class LogRankResult:
    chi2: float
    p_value: float
    times: np.ndarray
    observed_1: np.ndarray
    expected_1: np.ndarray
    variance_1: np.ndarray


def log_rank(group1, group2) -> LogRankResult:
    """Two-group log-rank test.

    At each distinct event time, the observed group-1 events are compared
    with their hypergeometric expectation under the null of a common
    hazard; the squared summed difference over the summed variance is
    chi-square with one degree of freedom.
    """
    t1 = np.array([r.time_months for r in group1], dtype=np.float64)
    e1 = np.array([r.event for r in group1], dtype=np.int64)
    t2 = np.array([r.time_months for r in group2], dtype=np.float64)
    e2 = np.array([r.event for r in group2], dtype=np.int64)
    if len(t1) == 0 or len(t2) == 0:
        raise ValueError("both groups must be non-empty")
    all_t = np.concatenate([t1, t2])
    all_e = np.concatenate([e1, e2])
    event_times = np.unique(all_t[all_e == 1])
    if len(event_times) == 0:
        raise ValueError("log-rank test undefined: no events in either group")

    times, obs, exp, var = [], [], [], []
    for tj in event_times:
        r1 = int((t1 >= tj).sum())
        r2 = int((t2 >= tj).sum())
        r = r1 + r2
        d1 = int(((t1 == tj) & (e1 == 1)).sum())
        d2 = int(((t2 == tj) & (e2 == 1)).sum())
        d = d1 + d2
        e1j = r1 * d / r
        v1j = r1 * r2 * d * (r - d) / (r * r * (r - 1)) if r > 1 else 0.0
        times.append(tj)
        obs.append(float(d1))
        exp.append(e1j)
        var.append(v1j)

    obs = np.array(obs)
    exp = np.array(exp)
    var = np.array(var)
    num = obs.sum() - exp.sum()
    den = var.sum()
    if den == 0.0:
        # Every event time was fully determined (single survivor or total
        # simultaneous death); there is no information to test.
        chi2 = 0.0
    else:
        chi2 = num * num / den
    return LogRankResult(
        chi2=float(chi2),
        p_value=chi2_tail_1df(float(chi2)),
        times=np.array(times),
        observed_1=obs,
        expected_1=exp,
        variance_1=var,
    )


# ---------------------------------------------------------------------------
# Weibull proportional hazards


@dataclass
class WeibullPhModel:
    """Fitted or hypothesized Weibull proportional-hazards model.

    beta is aligned with beta_names; a name containing ':' denotes the
    product of the named base covariates. sigma > 0 adds a normal random
    intercept on the linear predictor, marginalized by quadrature in the
    likelihood.
    """

    alpha: float
    lam: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta_names: tuple[str, ...] = ()
    sigma: float = 0.0
    standard_errors: dict | None = None
    diagnostics: dict | None = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.lam > 0):
            raise ValueError("alpha and lam must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if len(self.beta) != len(self.beta_names):
            raise ValueError("beta and beta_names must align")


def _covariate_value(covariates: dict, name: str) -> float:
    value = 1.0
    for part in name.split(":"):
        value *= covariates[part]
    return value


def design_matrix(records, names) -> np.ndarray:
    """Rows of covariate values for the given names; ':' in a name takes
    the product of the base covariates, computed exactly as named."""
    return np.array(
        [[_covariate_value(r.covariates, n) for n in names] for r in records],
        dtype=np.float64,
    )


def linear_predictor(model: WeibullPhModel, covariates: dict) -> float:
    return float(sum(b * _covariate_value(covariates, n)
                     for b, n in zip(model.beta, model.beta_names)))


def survival_function(model: WeibullPhModel, t, covariates: dict | None = None):
    """S(t | x) with the random intercept at its mean (zero)."""
    eta = 0.0 if covariates is None else linear_predictor(model, covariates)
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-(t ** model.alpha / model.lam) * np.exp(eta))


def hazard_function(model: WeibullPhModel, t, covariates: dict | None = None):
    """Instantaneous event rate at t for covariates x."""
    eta = 0.0 if covariates is None else linear_predictor(model, covariates)
    t = np.asarray(t, dtype=np.float64)
    return (model.alpha / model.lam) * t ** (model.alpha - 1.0) * np.exp(eta)


_GH_POINTS = 20


def _gh_nodes():
    z, w = np.polynomial.hermite.hermgauss(_GH_POINTS)
    return z, w


def _loglik_terms(log_alpha, log_lam, beta, X, t, d, sigma):
    """Per-record log-likelihood contributions and the pieces shared with
    the gradient. Returns (loglik_per_record, omega, u, eta_nodes) where
    omega are the quadrature posterior weights (None when sigma == 0)."""
    alpha = math.exp(log_alpha)
    lam = math.exp(log_lam)
    logt = np.log(t)
    eta = X @ beta if X.size else np.zeros(len(t))
    base = d * (log_alpha - log_lam + (alpha - 1.0) * logt)
    if sigma == 0.0:
        u = (t ** alpha / lam) * np.exp(eta)
        ll = base + d * eta - u
        return ll, None, u, None
    z, w = _gh_nodes()
    eps = math.sqrt(2.0) * sigma * z  # quadrature offsets for N(0, sigma^2)
    eta_k = eta[:, None] + eps[None, :]
    u_k = (t[:, None] ** alpha / lam) * np.exp(eta_k)
    ll_k = base[:, None] + d[:, None] * eta_k - u_k
    shifted = ll_k + np.log(w)[None, :]
    m = shifted.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(shifted - m).sum(axis=1))
    ll = lse - 0.5 * math.log(math.pi)
    omega = np.exp(shifted - lse[:, None])
    return ll, omega, u_k, eta_k


def log_likelihood(model: WeibullPhModel, records) -> float:
    """Censored log-likelihood of records under the model. Event records
    contribute density, censored records survival; sigma > 0 marginalizes
    the random intercept with 20-point Gauss-Hermite quadrature."""
    t = np.array([r.time_months for r in records], dtype=np.float64)
    d = np.array([r.event for r in records], dtype=np.float64)
    X = design_matrix(records, model.beta_names)
    ll, _, _, _ = _loglik_terms(
        math.log(model.alpha), math.log(model.lam), model.beta, X, t, d, model.sigma
    )
    return float(ll.sum())


def _loglik_and_grad(theta, X, t, d, sigma):
    """Value and analytic gradient with respect to
    (log alpha, log lam, beta...)."""
    log_alpha, log_lam = theta[0], theta[1]
    beta = theta[2:]
    alpha = math.exp(log_alpha)
    logt = np.log(t)
    ll, omega, u, _ = _loglik_terms(log_alpha, log_lam, beta, X, t, d, sigma)
    if omega is None:
        ga = d * (1.0 + alpha * logt) - u * alpha * logt
        gl = u - d
        gw = d - u
    else:
        ga_k = d[:, None] * (1.0 + alpha * logt[:, None]) - u * alpha * logt[:, None]
        gl_k = u - d[:, None]
        ga = (omega * ga_k).sum(axis=1)
        gl = (omega * gl_k).sum(axis=1)
        gw = -gl
    grad = np.empty(len(theta))
    grad[0] = ga.sum()
    grad[1] = gl.sum()
    if X.size:
        grad[2:] = X.T @ gw
    return float(ll.sum()), grad


def log_likelihood_gradient(model: WeibullPhModel, records) -> np.ndarray:
    """Gradient of the log-likelihood in (log alpha, log lam, beta...)."""
    t = np.array([r.time_months for r in records], dtype=np.float64)
    d = np.array([r.event for r in records], dtype=np.float64)
    X = design_matrix(records, model.beta_names)
    theta = np.concatenate([[math.log(model.alpha), math.log(model.lam)], model.beta])
    _, grad = _loglik_and_grad(theta, X, t, d, model.sigma)
    return grad


@dataclass
class ExpandedDesign:
    """Covariate matrix augmented with interaction product columns."""

    names: tuple[str, ...]
    matrix: np.ndarray


def expand_interactions(matrix: np.ndarray, names, max_order: int) -> ExpandedDesign:
    """All products of up to max_order distinct covariates.

    Column names join the factors with ':' in input order; the output has
    sum_{j=1..k} C(p, j) columns.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    names = tuple(names)
    p = len(names)
    if matrix.ndim != 2 or matrix.shape[1] != p:
        raise ValueError("matrix width must match the number of names")
    if len(set(names)) != p:
        raise ValueError("covariate names must be unique")
    if not (1 <= max_order <= p):
        raise ValueError("interaction order must be between 1 and the number of covariates")
    cols = []
    out_names = []
    for order in range(1, max_order + 1):
        for combo in itertools.combinations(range(p), order):
            cols.append(np.prod(matrix[:, combo], axis=1))
            out_names.append(":".join(names[i] for i in combo))
    return ExpandedDesign(tuple(out_names), np.column_stack(cols))


@dataclass
class FitOptions:
    max_iters: int = 500
    grad_tol: float = 1e-6
    random_intercept: bool = False
    sigma_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0)


def _fit_fixed_sigma(X, t, d, sigma, options, theta0):
    res = minimize(
        lambda th: tuple(-v for v in _loglik_and_grad(th, X, t, d, sigma)),
        theta0,
        jac=True,
        method="BFGS",
        options={"gtol": options.grad_tol, "maxiter": options.max_iters},
    )
    ll, grad = _loglik_and_grad(res.x, X, t, d, sigma)
    return res.x, ll, grad, int(res.nit)


def _numerical_hessian(theta, X, t, d, sigma, step=1e-5):
    k = len(theta)
    H = np.zeros((k, k))
    for j in range(k):
        h = step * max(1.0, abs(theta[j]))
        up = theta.copy()
        up[j] += h
        dn = theta.copy()
        dn[j] -= h
        _, gu = _loglik_and_grad(up, X, t, d, sigma)
        _, gd = _loglik_and_grad(dn, X, t, d, sigma)
        H[:, j] = (gu - gd) / (2.0 * h)
    return (H + H.T) / 2.0


def fit_weibull_ph(records, design: ExpandedDesign | None = None,
                   options: FitOptions | None = None) -> WeibullPhModel:
    """Maximum-likelihood Weibull proportional-hazards fit.

    Covariates are standardized internally for optimization and the
    estimates mapped back, so reported coefficients are in the original
    units. Positivity of alpha and lam is enforced by optimizing their
    logs with a quasi-Newton ascent; convergence means the gradient
    max-norm fell below options.grad_tol.

    With options.random_intercept, the intercept scale sigma is chosen by
    profile likelihood over options.sigma_grid plus a local refinement.
    """
    options = options or FitOptions()
    if not records:
        raise ValueError("no survival records")
    t = np.array([r.time_months for r in records], dtype=np.float64)
    d = np.array([r.event for r in records], dtype=np.float64)
    if d.sum() == 0:
        raise ValueError("cannot fit with zero observed events")

    if design is None:
        names: tuple[str, ...] = ()
        Z = np.zeros((len(t), 0))
    else:
        names = tuple(design.names)
        Z = np.asarray(design.matrix, dtype=np.float64)
        if Z.shape != (len(t), len(names)):
            raise ValueError("design matrix shape does not match records and names")

    p = Z.shape[1]
    if p:
        mean = Z.mean(axis=0)
        sd = Z.std(axis=0)
        if np.any(sd == 0):
            bad = names[int(np.argmax(sd == 0))]
            raise ValueError(f"rank-deficient design: covariate {bad!r} is constant")
        Xs = (Z - mean) / sd
        if np.linalg.matrix_rank(Xs) < p:
            raise ValueError("rank-deficient design: collinear covariates")
    else:
        mean = sd = np.zeros(0)
        Xs = Z

    theta0 = np.concatenate([[0.0, math.log(t.sum() / max(d.sum(), 1.0))], np.zeros(p)])

    def solve(sigma, start):
        return _fit_fixed_sigma(Xs, t, d, sigma, options, start)

    if options.random_intercept:
        best = None
        start = theta0
        for sigma in options.sigma_grid:
            sol = solve(sigma, start)
            start = sol[0]
            if best is None or sol[1] > best[1][1]:
                best = (sigma, sol)
        # golden-section refinement around the best grid point
        grid = list(options.sigma_grid)
        i = grid.index(best[0])
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, len(grid) - 1)]
        phi = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        for _ in range(12):
            m1 = b - phi * (b - a)
            m2 = a + phi * (b - a)
            s1 = solve(m1, best[1][0])
            s2 = solve(m2, best[1][0])
            if s1[1] >= s2[1]:
                b = m2
                if s1[1] > best[1][1]:
                    best = (m1, s1)
            else:
                a = m1
                if s2[1] > best[1][1]:
                    best = (m2, s2)
        sigma_hat, (theta, ll, grad, nit) = best
    else:
        sigma_hat = 0.0
        theta, ll, grad, nit = solve(0.0, theta0)

    grad_norm = float(np.abs(grad).max())
    converged = grad_norm < options.grad_tol

    # Back-transform to original units: eta = sum b'_j (x_j - m_j) / s_j
    # folds its constant part into lam.
    beta_std = theta[2:]
    alpha_hat = math.exp(theta[0])
    if p:
        beta_hat = beta_std / sd
        shift = float((beta_std * mean / sd).sum())
    else:
        beta_hat = beta_std
        shift = 0.0
    lam_hat = math.exp(theta[1] + shift)

    H = _numerical_hessian(theta, Xs, t, d, sigma_hat)
    se: dict[str, float] = {}
    try:
        cov = np.linalg.inv(-H)
        diag_ok = np.all(np.diag(cov) > 0)
        if diag_ok:
            se["alpha"] = alpha_hat * math.sqrt(cov[0, 0])
            # lam = exp(l' + sum b'_j m_j / s_j): delta method over (l', b')
            g = np.zeros(len(theta))
            g[1] = lam_hat
            if p:
                g[2:] = lam_hat * mean / sd
            se["lam"] = math.sqrt(float(g @ cov @ g))
            for j, name in enumerate(names):
                se[f"beta:{name}"] = math.sqrt(cov[2 + j, 2 + j]) / sd[j]
    except np.linalg.LinAlgError:
        se = {}

    return WeibullPhModel(
        alpha=alpha_hat,
        lam=lam_hat,
        beta=beta_hat,
        beta_names=names,
        sigma=sigma_hat,
        standard_errors=se or None,
        diagnostics={
            "converged": bool(converged),
            "iterations": nit,
            "grad_norm": grad_norm,
            "log_likelihood": float(ll),
        },
    )


def model_to_json(model: WeibullPhModel) -> dict:
    return {
        "alpha": model.alpha,
        "lambda": model.lam,
        "beta": {n: float(b) for n, b in zip(model.beta_names, model.beta)},
        "sigma": model.sigma,
        "standard_errors": model.standard_errors,
        "diagnostics": model.diagnostics,
    }


def save_model_json(model: WeibullPhModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Group splitting


def split_by_staining(pairs, rule="median"):
    """Split (PatientStaining, SurvivalRecord) pairs into low and high
    staining groups.

    rule "median" sorts by percentage and cuts into equal halves, the low
    group taking the extra patient when the count is odd. A numeric rule v
    (or the string "threshold(v)") puts percentage <= v into the low
    group. All-identical percentages cannot be split.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no patients to split")
    pcts = [p.percentage for p, _ in pairs]
    if len(set(pcts)) == 1:
        raise ValueError("degenerate split: all staining percentages identical")

    if isinstance(rule, str) and rule.startswith("threshold(") and rule.endswith(")"):
        rule = float(rule[len("threshold("):-1])

    if rule == "median":
        order = sorted(pairs, key=lambda pr: (pr[0].percentage, pr[0].patient_id))
        n_low = (len(order) + 1) // 2
        return order[:n_low], order[n_low:]

    threshold = float(rule)
    low = [pr for pr in pairs if pr[0].percentage <= threshold]
    high = [pr for pr in pairs if pr[0].percentage > threshold]
    if not low or not high:
        raise ValueError(f"degenerate split: threshold {threshold} leaves a group empty")
    return low, high

"""Summary and link functions, response likelihood and the regression M-step.

Per-sequence summary posteriors are dense arrays ``post[i, v]`` over
``v = 0..vmax``.  Because the link only depends on ``v``, every expectation
over the posterior collapses to per-value weights ``W_v = sum_i post[i, v]``
and ``Y_v = sum_i post[i, v] * y_i``, which keeps the trust-region
subproblem independent of N.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FlatCovariateError, InvalidArgumentError, ParameterOverflowError
from .model import Link, RegressionParams, StateSpace, SummarySpec

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
FLAT_TOL = 1e-12
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def summarize_path(Z, spec: SummarySpec, space: StateSpace) -> int:
    states = spec.states(space)
    return sum(1 for z in Z if int(z) in states)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def link_eval(gamma: RegressionParams, v):
    v_arr = np.asarray(v, dtype=float)
    if gamma.link is Link.LINEAR:
        mu = gamma.alpha + gamma.beta * v_arr
    else:
        mu = gamma.alpha + gamma.beta * sigmoid(gamma.s * (v_arr - gamma.t))
    return float(mu) if np.ndim(mu) == 0 else mu


def response_loglik(y, v, gamma: RegressionParams):
    """log N(y; f(v), sigma^2), broadcasting over y and v."""
    r = (np.asarray(y, dtype=float) - link_eval(gamma, v)) / gamma.sigma
    out = -0.5 * r * r - math.log(gamma.sigma) - _LOG_SQRT_2PI
    return float(out) if np.ndim(out) == 0 else out


def loglik_table(y, gamma: RegressionParams, vmax: int) -> np.ndarray:
    """(N, vmax+1) table of log p(y_i | v)."""
    y = np.asarray(y, dtype=float)
    return response_loglik(y[:, None], np.arange(vmax + 1)[None, :], gamma)


@dataclass
class Esss:
    """Expected summary sufficient statistics."""

    m1: np.ndarray
    m2: np.ndarray
    posteriors: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_posteriors(cls, post) -> "Esss":
        post = np.asarray(post, dtype=float)
        v = np.arange(post.shape[1], dtype=float)
        return cls(m1=post @ v, m2=post @ (v * v), posteriors=post)


def _normal_equations(m1, m2, y):
    """(alpha, beta) maximizing E[sum_i log N(y_i; alpha + beta c_i, s^2)]."""
    N = len(y)
    ybar = y.mean()
    m1bar = m1.mean()
    denom = m2.sum() - N * m1bar * m1bar
    if not denom / N > FLAT_TOL:
        raise FlatCovariateError(f"covariate variance {denom / N:.3g} is numerically zero")
    beta = (np.dot(m1, y) - N * ybar * m1bar) / denom
    alpha = ybar - beta * m1bar
    return float(alpha), float(beta)


def fit_linear(esss: Esss, y) -> tuple[float, float, float]:
    y = np.asarray(y, dtype=float)
    if len(y) < 2 or len(esss.m1) != len(y):
        raise InvalidArgumentError("need N >= 2 responses matching the statistics")
    alpha, beta = _normal_equations(esss.m1, esss.m2, y)
    resid = (y - alpha) ** 2 - 2 * beta * (y - alpha) * esss.m1 + beta * beta * esss.m2
    sigma = max(math.sqrt(max(resid.mean(), 0.0)), SIGMA_FLOOR)
    return alpha, beta, sigma


def update_sigma(posteriors, y, gamma: RegressionParams) -> float:
    post = np.asarray(posteriors, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise InvalidArgumentError("need N >= 2")
    mu = link_eval(gamma, np.arange(post.shape[1]))
    sq = (post * (y[:, None] - mu[None, :]) ** 2).sum() / len(y)
    return max(math.sqrt(sq), SIGMA_FLOOR)


def q2(gamma: RegressionParams, posteriors, y) -> float:
    """E_v[log p(Y | V, Gamma, sigma)] under the given summary posteriors."""
    post = np.asarray(posteriors, dtype=float)
    table = loglik_table(y, gamma, post.shape[1] - 1)
    mask = post > 0
    return float((post[mask] * table[mask]).sum())


def q2_tanh_grad(theta, sigma: float, posteriors, y):
    """Tanh-link Q2 and its gradient with respect to (alpha, beta, s, t)."""
    a, b, s, t = (float(x) for x in theta)
    post = np.asarray(posteriors, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.arange(post.shape[1], dtype=float)
    u = sigmoid(s * (v - t))
    du = u * (1.0 - u)
    mu = a + b * u
    W = post.sum(axis=0)
    Y1 = post.T @ y
    N = len(y)
    sse = float((y * y).sum() - 2 * np.dot(Y1, mu) + np.dot(W, mu * mu))
    value = -0.5 * sse / sigma ** 2 - N * (math.log(sigma) + _LOG_SQRT_2PI)
    e = Y1 - W * mu  # d(-sse/2)/d mu_v
    g_mu = e / sigma ** 2
    grad = np.array([
        g_mu.sum(),
        np.dot(g_mu, u),
        np.dot(g_mu, b * du * (v - t)),
        np.dot(g_mu, -b * du * s),
    ])
    return value, grad


@dataclass
class TanhFitInfo:
    rounds: int
    q2_trace: list
    status: str


def _phi_parts(a, b, s, t, v, W, Y1):
    u = sigmoid(s * (v - t))
    mu = a + b * u
    phi = 0.5 * np.dot(W, mu * mu) - np.dot(Y1, mu)
    du = u * (1.0 - u)
    J = np.stack([b * du * (v - t), -b * du * s], axis=1)  # d mu / d(s, t)
    g = J.T @ (W * mu - Y1)
    H = J.T @ (W[:, None] * J)
    return phi, g, H


def _dogleg(g, H, radius):
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        return np.zeros_like(g)
    reg = 1e-12 * max(np.trace(H), 1e-300)
    try:
        p_newton = -np.linalg.solve(H + reg * np.eye(len(g)), g)
    except np.linalg.LinAlgError:
        p_newton = None
    if p_newton is not None and np.all(np.isfinite(p_newton)) and np.linalg.norm(p_newton) <= radius:
        return p_newton
    gHg = float(g @ H @ g)
    p_cauchy = -(gn * gn / gHg) * g if gHg > 0 else -radius * g / gn
    if np.linalg.norm(p_cauchy) >= radius or p_newton is None or not np.all(np.isfinite(p_newton)):
        return -radius * g / gn
    d = p_newton - p_cauchy
    aa = float(d @ d)
    bb = 2 * float(p_cauchy @ d)
    cc = float(p_cauchy @ p_cauchy) - radius * radius
    tau = (-bb + math.sqrt(max(bb * bb - 4 * aa * cc, 0.0))) / (2 * aa)
    return p_cauchy + tau * d


def trust_region_shape(a, b, s, t, posteriors, y, radius=1.0, shrink=0.25, grow=2.0,
                       max_iter=100, gtol=1e-10):
    """Minimize the expected squared error over (s, t) with a dogleg trust region.

    The model Hessian is the Gauss-Newton matrix, so every dogleg step is a
    descent step and rejected steps only shrink the radius.
    """
    post = np.asarray(posteriors, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.arange(post.shape[1], dtype=float)
    W = post.sum(axis=0)
    Y1 = post.T @ y
    x = np.array([s, t], dtype=float)
    phi, g, H = _phi_parts(a, b, x[0], x[1], v, W, Y1)
    status = "max-iterations"
    for _ in range(max_iter):
        if np.linalg.norm(g) <= gtol * max(1.0, abs(phi)):
            status = "converged"
            break
        if radius < 1e-12:
            status = "converged-at-boundary"
            break
        p = _dogleg(g, H, radius)
        predicted = -(g @ p + 0.5 * p @ H @ p)
        trial = x + p
        phi_new, g_new, H_new = _phi_parts(a, b, trial[0], trial[1], v, W, Y1)
        if not np.isfinite(phi_new):
            raise ParameterOverflowError("tanh objective became non-finite")
        actual = phi - phi_new
        rho = actual / predicted if predicted > 0 else -1.0
        if rho < 0.25:
            radius *= shrink
        elif rho > 0.75 and np.linalg.norm(p) >= 0.99 * radius:
            radius *= grow
        if rho > 0 and actual > 0:
            x, phi, g, H = trial, phi_new, g_new, H_new
    return float(x[0]), float(x[1]), status


def fit_tanh(posteriors, y, warm_start: RegressionParams, tol: float = 1e-8,
             max_rounds: int = 50):
    """Alternate the closed-form (alpha, beta) block with the (s, t) trust region.

    Returns ``(params, info)``.  Raises FlatCovariateError when the
    expected link shape has no spread across sequences.
    """
    post = np.asarray(posteriors, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 4:
        raise InvalidArgumentError("tanh fit needs N >= 4")
    v = np.arange(post.shape[1], dtype=float)
    cur = warm_start.replace(link=Link.TANH)
    trace = [q2(cur, post, y)]
    status = "max-rounds"
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        u = sigmoid(cur.s * (v - cur.t))
        alpha, beta = _normal_equations(post @ u, post @ (u * u), y)
        s, t, _ = trust_region_shape(alpha, beta, cur.s, cur.t, post, y)
        cur = cur.replace(alpha=alpha, beta=beta, s=s, t=t)
        cur = cur.replace(sigma=update_sigma(post, y, cur))
        value = q2(cur, post, y)
        if not math.isfinite(value):
            raise ParameterOverflowError("Q2 became non-finite")
        trace.append(value)
        if value - trace[-2] < tol * max(1.0, abs(value)):
            status = "converged"
            break
    return cur, TanhFitInfo(rounds=rounds, q2_trace=trace, status=status)


def init_regression(y, m1, link: Link | str = Link.TANH) -> RegressionParams:
    """Scale-matched warm start from responses and initial E[v]."""
    y = np.asarray(y, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    sd = float(y.std()) or 1.0
    sign = 1.0
    if m1.std() > 0 and y.std() > 0 and np.corrcoef(m1, y)[0, 1] < 0:
        sign = -1.0
    return RegressionParams(link=Link(link), alpha=float(y.mean()), beta=sign * sd,
                            s=1.0, t=float(np.median(m1)), sigma=sd)

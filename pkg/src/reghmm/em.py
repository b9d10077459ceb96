"""Approximate EM for the regression-coupled HMM, the two-stage baseline and prediction."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dp
from .errors import DivergedRegressionError, FlatCovariateError, InvalidArgumentError
from .model import (EMISSION_FLOOR, DEFAULT_ENTRY_RATE, HmmParams, Link, RegressionParams,
                    SummaryMode, SummarySpec, encode, init_params, most_enriched_kmer,
                    tie_emissions, tie_from_counts, validate)
from .regression import (SIGMA_FLOOR, Esss, fit_linear, fit_tanh, init_regression,
                         link_eval, loglik_table, q2)

log = logging.getLogger(__name__)

MAX_REGRESSION_FAILURES = 3
SEEDINGS = ("frequency", "response")


@dataclass
class TrainConfig:
    K: int = 6
    max_iters: int = 100
    rel_tol: float = 1e-6
    d_init: int = dp.DEFAULT_D_INIT
    d_cap: int = dp.DEFAULT_D_CAP
    coverage_threshold: float = dp.DEFAULT_COVERAGE
    summary: SummaryMode = SummaryMode.ALL_BOUND
    link: Link = Link.TANH
    position_dependent: bool = True
    seed: int | None = 0
    emission_floor: float = EMISSION_FLOOR
    sigma_floor: float = SIGMA_FLOOR
    dominance: float = 0.7
    entry_rate: float = DEFAULT_ENTRY_RATE
    # "frequency": most frequent K-mer; "response": most response-enriched K-mer
    seeding: str = "frequency"
    n_restarts: int = 1
    patience: int = 5
    # False keeps the starting regression parameters fixed throughout
    update_regression: bool = True
    threads: int = 0

    def __post_init__(self):
        self.summary = SummaryMode(self.summary)
        self.link = Link(self.link)
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not 0 < self.rel_tol < 1:
            raise InvalidArgumentError("rel_tol must lie in (0, 1)")
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.d_init < 1 or self.d_cap < 1:
            raise InvalidArgumentError("d_init and d_cap must be >= 1")
        if not 0 < self.coverage_threshold < 1:
            raise InvalidArgumentError("coverage_threshold must lie in (0, 1)")
        if not 0 < self.emission_floor < 0.25:
            raise InvalidArgumentError("emission_floor must lie in (0, 0.25)")
        if self.sigma_floor <= 0:
            raise InvalidArgumentError("sigma_floor must be positive")
        if self.n_restarts < 1 or self.patience < 1:
            raise InvalidArgumentError("n_restarts and patience must be >= 1")
        if self.seeding not in SEEDINGS:
            raise InvalidArgumentError(f"seeding must be one of {SEEDINGS}")
        if self.threads < 0:
            raise InvalidArgumentError("threads must be >= 0")

    @property
    def spec(self) -> SummarySpec:
        return SummarySpec(self.summary)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary.value
        d["link"] = self.link.value
        return d


@dataclass
class EStepStats:
    """Response-adjusted posteriors for every sequence.

    ``xi[i, l]`` holds the posteriors of the three free moves out of
    background between ``l`` and ``l + 1`` (stay, enter sense, enter
    antisense).  ``posteriors`` is p(v | X_i, y_i); ``marginal`` is
    p(v | X_i).
    """

    gamma: np.ndarray
    xi: np.ndarray
    marginal: np.ndarray
    posteriors: np.ndarray
    loglik_x: np.ndarray
    loglik_y: np.ndarray
    used_d: np.ndarray
    under_covered: np.ndarray

    @property
    def loglik(self) -> np.ndarray:
        """Per-sequence joint log-likelihood log p(X_i, y_i)."""
        return self.loglik_x + self.loglik_y

    @property
    def joint_loglik(self) -> float:
        return math.fsum(self.loglik)

    @property
    def coverage_warnings(self) -> int:
        return int((self.under_covered > 0).sum())


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, **rec):
        self.records.append(rec)

    def column(self, name) -> list:
        return [r[name] for r in self.records]

    @property
    def loglik(self) -> list:
        return self.column("joint_loglik")

    @property
    def phases(self) -> list:
        seen = []
        for r in self.records:
            if r["phase"] not in seen:
                seen.append(r["phase"])
        return seen

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


# -- data plumbing -----------------------------------------------------------

def _matrix(data) -> np.ndarray:
    X = data.X if hasattr(data, "X") else data
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return np.ascontiguousarray(X, dtype=np.int64)
    rows = [encode(s) for s in X]
    if not rows:
        raise InvalidArgumentError("no sequences")
    if len({len(r) for r in rows}) > 1:
        raise InvalidArgumentError("sequences must share one length")
    return np.vstack(rows).astype(np.int64)


def _arrays(data, y=None):
    X = _matrix(data)
    if y is None:
        y = data.y
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise InvalidArgumentError("empty dataset")
    if len(y) != X.shape[0]:
        raise InvalidArgumentError("responses do not match sequences")
    return X, y


def _set_threads(cfg: TrainConfig) -> None:
    if cfg.threads:
        import numba
        numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))


# -- E-step ------------------------------------------------------------------

def e_step(data, params: HmmParams, gamma_params: RegressionParams, cfg: TrainConfig,
           y=None, use_response: bool = True) -> EStepStats:
    """Posteriors of the hidden states given sequences and responses.

    With ``use_response=False`` the response factor is uniform and the
    result is the plain forward-backward (Baum-Welch) E-step; the summary
    posteriors are then left empty.
    """
    X, y = _arrays(data, y)
    N, L = X.shape
    if not use_response:
        gamma, xi, llx = dp.forward_backward_batch(X, params)
        empty = np.zeros((N, 0))
        return EStepStats(gamma=gamma, xi=xi, marginal=empty, posteriors=empty,
                          loglik_x=llx, loglik_y=np.zeros(N), used_d=np.zeros(N, dtype=np.int64),
                          under_covered=np.zeros(N, dtype=np.int64))
    logpy = loglik_table(y, gamma_params, L)
    if not np.all(np.isfinite(logpy)):
        raise DivergedRegressionError("response likelihood is not finite")
    gt, xi, marg, post, llx, lly, used, under, mincov = dp.response_estep_batch(
        X, params, cfg.spec, logpy, cfg.d_init, cfg.coverage_threshold, cfg.d_cap)
    if not np.all(np.isfinite(lly)):
        raise DivergedRegressionError("response likelihood under the summary posterior is not finite")
    n_under = int((under > 0).sum())
    if n_under:
        log.warning("path coverage below threshold",
                    extra={"event": "under_coverage", "sequences": n_under,
                           "max_D": int(used.max()), "min_coverage": float(mincov.min())})
    return EStepStats(gamma=gt, xi=xi, marginal=marg, posteriors=post, loglik_x=llx,
                      loglik_y=lly, used_d=used, under_covered=under)


# -- M-step ------------------------------------------------------------------

def emission_counts(stats: EStepStats, X: np.ndarray) -> np.ndarray:
    onehot = np.eye(4)[X]
    return np.einsum("nls,nlb->sb", stats.gamma, onehot)


def m_step_hmm(stats: EStepStats, data, current: HmmParams,
               floor: float = EMISSION_FLOOR) -> HmmParams:
    """Baum-Welch style update from (response-adjusted) expected counts."""
    X = _matrix(data)
    E = tie_from_counts(emission_counts(stats, X), floor, fallback=current.emissions)

    counts = stats.xi.sum(axis=0)
    L, K = current.L, current.K
    feasible = np.array([l + 1 + K <= L for l in range(L - 1)], dtype=bool)
    tr = np.array(current.transitions, dtype=float)
    if current.position_dependent:
        for l in range(L - 1):
            total = counts[l].sum()
            if total > 0:
                tr[l] = counts[l] / total
            else:
                log.info("no expected transitions at l=%d, keeping previous row", l)
    else:
        pooled = counts[feasible].sum(axis=0) if feasible.any() else counts.sum(axis=0)
        if pooled.sum() > 0:
            tr[:] = pooled / pooled.sum()
        else:
            log.info("no expected transitions, keeping previous shared row")

    first = stats.gamma[:, 0, :].sum(axis=0)
    pi = first / first.sum()
    return current.replace(emissions=E, transitions=tr, initial=pi)


def m_step_regression(stats: EStepStats, y, cfg: TrainConfig,
                      current: RegressionParams) -> RegressionParams:
    """Regression update from the response-conditioned summary posteriors."""
    y = np.asarray(y, dtype=float)
    post = stats.posteriors
    if cfg.link is Link.LINEAR:
        alpha, beta, sigma = fit_linear(Esss.from_posteriors(post), y)
        new = RegressionParams(Link.LINEAR, alpha, beta, current.s, current.t,
                               max(sigma, cfg.sigma_floor))
    else:
        new, _ = fit_tanh(post, y, current)
        new = new.replace(sigma=max(new.sigma, cfg.sigma_floor))
    if not all(math.isfinite(v) for v in (new.alpha, new.beta, new.s, new.t, new.sigma)):
        raise DivergedRegressionError("regression parameters became non-finite")
    return new


def _xlogy(w, logp) -> float:
    """sum w * logp, treating 0 * log 0 as 0."""
    w = np.asarray(w, dtype=float)
    logp = np.broadcast_to(logp, w.shape)
    mask = w > 0
    return float((w[mask] * logp[mask]).sum())


def q1(stats: EStepStats, data, params: HmmParams) -> float:
    """Expected complete-data log-likelihood of the sequence part."""
    X = _matrix(data)
    lE = np.moveaxis(params.log_emissions[:, X], 0, -1)  # N x L x S
    with np.errstate(divide="ignore"):
        lt = np.log(params.effective_triples())
    return (_xlogy(stats.gamma, lE) + _xlogy(stats.xi, lt[None])
            + _xlogy(stats.gamma[:, 0, :], params.log_initial[None]))


# -- likelihood and prediction ----------------------------------------------

def _log_mix(marg: np.ndarray, logpy: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lw = np.where(marg > 0, np.log(np.where(marg > 0, marg, 1.0)) + logpy, -np.inf)
    top = lw.max(axis=1)
    return top + np.log(np.exp(lw - top[:, None]).sum(axis=1))


@dataclass
class LoglikReport:
    total: float
    per_sequence: np.ndarray
    lower_bound: bool
    under_covered: int


def joint_loglik(data, params: HmmParams, gamma_params: RegressionParams, cfg: TrainConfig,
                 y=None, details: bool = False):
    """sum_i log p(X_i) + log sum_v p(y_i | v) p(v | X_i)."""
    X, y = _arrays(data, y)
    L = X.shape[1]
    marg, llx, _, mincov = dp.marginal_batch(X, params, cfg.spec, cfg.d_init,
                                             cfg.coverage_threshold, cfg.d_cap)
    per = llx + _log_mix(marg, loglik_table(y, gamma_params, L))
    under = int((mincov < cfg.coverage_threshold).sum())
    total = math.fsum(per)
    if under:
        log.warning("joint log-likelihood computed from under-covered path sets",
                    extra={"event": "under_coverage", "sequences": under})
    if details:
        return LoglikReport(total=total, per_sequence=per, lower_bound=under > 0,
                            under_covered=under)
    return total


def predict_batch(data, params: HmmParams, gamma_params: RegressionParams,
                  cfg: TrainConfig | None = None):
    """Posterior means of f(v) under p(v | X); returns (predictions, under-covered flags)."""
    cfg = cfg or TrainConfig(K=params.K)
    X = _matrix(data)
    if X.shape[0] == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    L = X.shape[1]
    marg, _, _, mincov = dp.marginal_batch(X, params, cfg.spec, cfg.d_init,
                                           cfg.coverage_threshold, cfg.d_cap)
    f = np.asarray(link_eval(gamma_params, np.arange(L + 1)), dtype=float)
    yhat = marg @ f / marg.sum(axis=1)
    return yhat, mincov < cfg.coverage_threshold


def predict(X, params: HmmParams, gamma_params: RegressionParams,
            cfg: TrainConfig | None = None) -> float:
    yhat, _ = predict_batch(encode(X)[None, :], params, gamma_params, cfg)
    return float(yhat[0])


# -- training ----------------------------------------------------------------

def _start(X, y, cfg: TrainConfig, rng, restart: int, use_response: bool = True):
    kmer = None
    if use_response and cfg.seeding == "response":
        kmer, _ = most_enriched_kmer(X, y, cfg.K)
    params = init_params(X, cfg.K, cfg.dominance, cfg.entry_rate, cfg.position_dependent,
                         kmer=kmer)
    if restart > 0:
        noise = rng.dirichlet(np.ones(4), size=params.n_states)
        E = tie_emissions(0.7 * params.emissions + 0.3 * noise, cfg.emission_floor)
        E[0] = params.emissions[0]
        params = params.replace(emissions=E)
    marg, _, _, _ = dp.marginal_batch(X, params, cfg.spec, cfg.d_init,
                                      cfg.coverage_threshold, cfg.d_cap)
    esss = Esss.from_posteriors(marg)
    gamma = init_regression(y, esss.m1, cfg.link)
    if cfg.link is Link.LINEAR:
        try:
            alpha, beta, sigma = fit_linear(esss, y)
            gamma = gamma.replace(alpha=alpha, beta=beta, sigma=max(sigma, cfg.sigma_floor))
        except FlatCovariateError:
            pass
    return params, gamma


def _em_loop(X, y, params, gamma, cfg: TrainConfig, trace: TrainTrace, phase: str,
             use_response: bool = True):
    """Iterate until the relative change drops below rel_tol; keep the best iterate."""
    best = (params, gamma, -math.inf)
    prev = None
    stall = 0
    failures = 0
    for it in range(cfg.max_iters + 1):
        t0 = time.perf_counter()
        stats = e_step(X, params, gamma, cfg, y=y, use_response=use_response)
        ll = stats.joint_loglik if use_response else math.fsum(stats.loglik_x)
        if not math.isfinite(ll):
            raise DivergedRegressionError("joint log-likelihood is not finite")
        trace.append(phase=phase, iteration=it, joint_loglik=ll,
                     q1=q1(stats, X, params),
                     q2=q2(gamma, stats.posteriors, y) if use_response else None,
                     sigma=gamma.sigma, max_d=int(stats.used_d.max()),
                     coverage_warnings=stats.coverage_warnings,
                     wall_time=time.perf_counter() - t0)
        if ll > best[2]:
            best = (params, gamma, ll)
            stall = 0
        else:
            stall += 1
        if prev is not None and abs(ll - prev) <= cfg.rel_tol * abs(prev):
            break
        if stall >= cfg.patience or it == cfg.max_iters:
            break
        prev = ll

        params = m_step_hmm(stats, X, params, cfg.emission_floor)
        if use_response and cfg.update_regression:
            try:
                gamma = m_step_regression(stats, y, cfg, gamma)
                failures = 0
            except FlatCovariateError as exc:
                failures += 1
                log.warning("regression update skipped: %s", exc)
                if failures >= MAX_REGRESSION_FAILURES:
                    raise DivergedRegressionError(
                        f"regression update failed {failures} times in a row") from exc
    return best


def train(data, cfg: TrainConfig, y=None, init=None):
    """Joint EM on sequences and responses.

    ``init`` optionally supplies a starting ``(HmmParams, RegressionParams)``;
    otherwise the start is seeded from the most frequent K-mer.  Returns the
    best parameters seen, by joint log-likelihood, and the trace.
    """
    X, y = _arrays(data, y)
    if X.shape[1] < cfg.K:
        raise InvalidArgumentError(f"sequence length {X.shape[1]} shorter than K={cfg.K}")
    _set_threads(cfg)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    best = None
    for r in range(cfg.n_restarts if init is None else 1):
        params, gamma = init if init is not None else _start(X, y, cfg, rng, r)
        problems = validate(params)
        if problems:
            raise InvalidArgumentError("invalid starting parameters: " + "; ".join(problems))
        phase = "joint" if cfg.n_restarts == 1 else f"joint/restart-{r}"
        result = _em_loop(X, y, params, gamma, cfg, trace, phase)
        if best is None or result[2] > best[2]:
            best = result
    return best[0], best[1], trace


def _regression_only(y, marg, gamma, cfg: TrainConfig, trace: TrainTrace, llx: np.ndarray):
    """EM over the regression parameters with p(v | X) held fixed."""
    L = marg.shape[1] - 1
    best = (gamma, -math.inf)
    prev = None
    failures = 0
    for it in range(cfg.max_iters + 1):
        t0 = time.perf_counter()
        logpy = loglik_table(y, gamma, L)
        lly = _log_mix(marg, logpy)
        if not np.all(np.isfinite(lly)):
            raise DivergedRegressionError("response likelihood is not finite")
        post = np.where(marg > 0, np.exp(logpy - lly[:, None]) * marg, 0.0)
        ll = math.fsum(llx) + math.fsum(lly)
        trace.append(phase="regression", iteration=it, joint_loglik=ll, q1=None,
                     q2=q2(gamma, post, y), sigma=gamma.sigma, max_d=None,
                     coverage_warnings=0, wall_time=time.perf_counter() - t0)
        if ll > best[1]:
            best = (gamma, ll)
        if prev is not None and abs(ll - prev) <= cfg.rel_tol * abs(prev):
            break
        if it == cfg.max_iters:
            break
        prev = ll
        stats = EStepStats(gamma=np.zeros((0, 0, 0)), xi=np.zeros((0, 0, 3)), marginal=marg,
                           posteriors=post, loglik_x=llx, loglik_y=lly,
                           used_d=np.zeros(0, dtype=np.int64),
                           under_covered=np.zeros(0, dtype=np.int64))
        try:
            gamma = m_step_regression(stats, y, cfg, gamma)
            failures = 0
        except FlatCovariateError as exc:
            failures += 1
            log.warning("regression update skipped: %s", exc)
            if failures >= MAX_REGRESSION_FAILURES:
                raise DivergedRegressionError(
                    f"regression update failed {failures} times in a row") from exc
    return best[0]


def train_two_stage(data, cfg: TrainConfig, y=None, init=None):
    """Baum-Welch on the sequences alone, then regression with the HMM frozen."""
    X, y = _arrays(data, y)
    if X.shape[1] < cfg.K:
        raise InvalidArgumentError(f"sequence length {X.shape[1]} shorter than K={cfg.K}")
    _set_threads(cfg)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    best = None
    for r in range(cfg.n_restarts if init is None else 1):
        params, gamma = init if init is not None else _start(X, y, cfg, rng, r, use_response=False)
        result = _em_loop(X, y, params, gamma, cfg, trace, "baum-welch", use_response=False)
        if best is None or result[2] > best[2]:
            best = result
    params = best[0]
    marg, llx, _, _ = dp.marginal_batch(X, params, cfg.spec, cfg.d_init,
                                        cfg.coverage_threshold, cfg.d_cap)
    start = init[1] if init is not None else init_regression(y, Esss.from_posteriors(marg).m1,
                                                              cfg.link)
    gamma = _regression_only(y, marg, start, cfg, trace, llx)
    return params, gamma, trace


__all__ = [
    "TrainConfig", "EStepStats", "TrainTrace", "LoglikReport", "e_step", "emission_counts",
    "m_step_hmm", "m_step_regression", "q1", "joint_loglik", "predict", "predict_batch",
    "train", "train_two_stage",
]

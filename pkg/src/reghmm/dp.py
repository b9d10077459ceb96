"""Forward-backward, Viterbi and top-D conditional Viterbi path integration.

The path-integration routine keeps, for every position ``l`` and state
``z``, the ``D`` most probable complete paths constrained through
``z_l = z``.  Forward lists carry the arrival transition and emission at
``l``; backward lists carry the departure transition and all emissions
strictly after ``l``, so a forward/backward pair combines by a plain sum.
The summary value of each path rides along with its rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError
from .model import HmmParams, SummarySpec, encode, validate

log = logging.getLogger(__name__)

DEFAULT_D_INIT = 64
DEFAULT_D_CAP = 4096
DEFAULT_COVERAGE = 0.99


@dataclass
class PosteriorTables:
    gamma: np.ndarray
    xi: np.ndarray
    loglik: float
    loglik_backward: float


@dataclass
class PathSet:
    """Top-D conditional paths for one sequence.

    ``C[l, z, d]`` is the log joint probability log p(Z_d, X) of the d-th
    best path through ``z_l = z`` (``-inf`` padding past ``counts[l, z]``),
    ``V[l, z, d]`` its summary value (``-1`` padding).
    """

    C: np.ndarray
    V: np.ndarray
    counts: np.ndarray
    D: int
    coverage: np.ndarray
    loglik: float
    threshold: float
    positions: np.ndarray = field(default=None)

    @property
    def under_covered(self) -> bool:
        return bool((self.coverage < self.threshold).any())


@dataclass
class SummaryPosterior:
    """Sparse distribution over integer summary values."""

    support: np.ndarray
    mass: np.ndarray
    remaining: float = 0.0

    @classmethod
    def from_dense(cls, dense, remaining: float = 0.0) -> "SummaryPosterior":
        dense = np.asarray(dense, dtype=float)
        idx = np.flatnonzero(dense > 0)
        return cls(support=idx, mass=dense[idx], remaining=float(remaining))

    def dense(self, vmax: int) -> np.ndarray:
        out = np.zeros(vmax + 1)
        np.add.at(out, self.support, self.mass)
        return out

    def mean(self) -> float:
        return float(np.dot(self.support, self.mass))

    def second_moment(self) -> float:
        return float(np.dot(self.support.astype(float) ** 2, self.mass))

    def as_dict(self) -> dict[int, float]:
        return {int(v): float(m) for v, m in zip(self.support, self.mass)}


# -- structure helpers ------------------------------------------------------

def _adjacency(allowed: np.ndarray, incoming: bool) -> np.ndarray:
    S = allowed.shape[0]
    lists = [np.flatnonzero(allowed[:, z] if incoming else allowed[z]) for z in range(S)]
    width = max(len(x) for x in lists)
    out = np.full((S, width), -1, dtype=np.int64)
    for z, x in enumerate(lists):
        out[z, :len(x)] = x
    return out


@dataclass(frozen=True)
class _Compiled:
    log_E: np.ndarray
    log_tr: np.ndarray
    log_pi: np.ndarray
    inset: np.ndarray
    pred: np.ndarray
    succ: np.ndarray
    alias_root: np.ndarray
    alias_off: np.ndarray


def compile_params(params: HmmParams, spec: SummarySpec | None = None,
                   length: int | None = None) -> _Compiled:
    """Arrays consumed by the compiled kernels, for sequences of ``length``."""
    if length is not None and length != params.L:
        params = for_length(params, length)
    space = params.space
    S = space.n_states
    alias_root = np.zeros(S, dtype=np.int64)
    alias_off = np.zeros(S, dtype=np.int64)
    for z in range(1, S):
        k = space.chain_position(z)
        alias_off[z] = k - 1
        alias_root[z] = z - (k - 1)
    inset = spec.mask(space) if spec is not None else np.zeros(S, dtype=np.int64)
    allowed = space.structural
    return _Compiled(
        log_E=np.ascontiguousarray(params.log_emissions),
        log_tr=np.ascontiguousarray(params.log_transitions).reshape(params.L - 1, S, S),
        log_pi=np.ascontiguousarray(params.log_initial),
        inset=inset,
        pred=_adjacency(allowed, incoming=True),
        succ=_adjacency(allowed, incoming=False),
        alias_root=alias_root,
        alias_off=alias_off,
    )


def for_length(params: HmmParams, n: int) -> HmmParams:
    """Parameters adapted to sequences of length ``n``."""
    if n == params.L:
        return params
    if n < params.K:
        raise InvalidArgumentError(f"sequence length {n} shorter than motif length {params.K}")
    tr = params.transitions
    if n < params.L:
        tr = tr[:n - 1]
    elif not params.position_dependent:
        tr = np.tile(tr[:1], (n - 1, 1))
    else:
        raise InvalidArgumentError(
            f"position-dependent model trained for L={params.L} cannot score length {n}")
    return params.replace(transitions=tr.reshape(n - 1, 3))


def _prepare(X, params: HmmParams):
    x = encode(X)
    if len(x) < params.K:
        raise InvalidArgumentError(f"sequence length {len(x)} shorter than motif length {params.K}")
    problems = validate(params)
    if problems:
        raise InvalidArgumentError("invalid parameters: " + "; ".join(problems))
    return x


def _log_em(comp: _Compiled, x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(comp.log_E[:, x].T)


# -- public operations ------------------------------------------------------

def forward_backward(X, params: HmmParams) -> PosteriorTables:
    x = _prepare(X, params)
    comp = compile_params(params, length=len(x))
    log_em = _log_em(comp, x)
    la, lb, ll, ll_b = _kernels.forward_backward(log_em, comp.log_tr, comp.log_pi)
    gamma = np.exp(la + lb - ll)
    xi = np.exp(la[:-1, :, None] + comp.log_tr + (log_em[1:] + lb[1:])[:, None, :] - ll)
    return PosteriorTables(gamma=gamma, xi=xi, loglik=float(ll), loglik_backward=float(ll_b))


def viterbi(X, params: HmmParams) -> tuple[list[int], float]:
    x = _prepare(X, params)
    comp = compile_params(params, length=len(x))
    path, lp = _kernels.viterbi(_log_em(comp, x), comp.log_tr, comp.log_pi)
    return [int(z) for z in path], float(lp)


def top_d_conditional_paths(X, params: HmmParams, spec: SummarySpec,
                            d_init: int = DEFAULT_D_INIT,
                            coverage_threshold: float = DEFAULT_COVERAGE,
                            d_cap: int = DEFAULT_D_CAP,
                            grow: bool = True) -> PathSet:
    """Top-D conditional Viterbi paths with coverage-driven width doubling.

    With ``grow=False`` the width stays at ``d_init`` whatever the coverage.
    """
    if d_init < 1:
        raise InvalidArgumentError("d_init must be >= 1")
    if not 0 < coverage_threshold < 1:
        raise InvalidArgumentError("coverage_threshold must lie in (0, 1)")
    x = _prepare(X, params)
    comp = compile_params(params, spec, length=len(x))
    log_em = _log_em(comp, x)
    la, lb, ll, _ = _kernels.forward_backward(log_em, comp.log_tr, comp.log_pi)
    cap = max(d_cap, d_init) if grow else d_init
    C, V, Cn, cov, D = _kernels.grow_paths(log_em, comp.log_tr, comp.log_pi, comp.inset,
                                           comp.pred, comp.succ, comp.alias_root,
                                           comp.alias_off, la, lb, False,
                                           int(d_init), int(cap), float(coverage_threshold))
    paths = PathSet(C=C, V=V, counts=Cn, D=int(D), coverage=cov, loglik=float(ll),
                    threshold=coverage_threshold)
    if paths.under_covered:
        bad = int((cov < coverage_threshold).sum())
        log.warning("path coverage below threshold",
                    extra={"event": "under_coverage", "cells": bad, "D": int(D),
                           "min_coverage": float(cov.min())})
    return paths


def conditional_summary_posterior(paths: PathSet, l: int, z: int) -> SummaryPosterior:
    n = int(paths.counts[l, z])
    if n == 0:
        raise InvalidArgumentError(f"no feasible path passes through state {z} at position {l}")
    c = paths.C[l, z, :n]
    w = np.exp(c - c[0])
    w /= w.sum()
    dense = np.bincount(paths.V[l, z, :n], weights=w)
    remaining = max(0.0, 1.0 - float(paths.coverage[l, z]))
    return SummaryPosterior.from_dense(dense, remaining)


def marginal_summary_posterior(X, params: HmmParams, spec: SummarySpec,
                               d_init: int = DEFAULT_D_INIT,
                               coverage_threshold: float = DEFAULT_COVERAGE,
                               d_cap: int = DEFAULT_D_CAP) -> SummaryPosterior:
    """p(v | X): conditional path sets at l = 0 weighted by p(z_0 | X)."""
    x = _prepare(X, params)
    marg, _, used, mincov = marginal_batch(x[None, :], params, spec, d_init,
                                           coverage_threshold, d_cap)
    return SummaryPosterior.from_dense(marg[0], max(0.0, 1.0 - float(mincov[0])))


# -- batched forms used by training and prediction ---------------------------

def _stack(sequences) -> np.ndarray:
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        return np.ascontiguousarray(sequences, dtype=np.int64)
    rows = [encode(s) for s in sequences]
    if len({len(r) for r in rows}) > 1:
        raise InvalidArgumentError("sequences must share one length")
    return np.ascontiguousarray(np.vstack(rows), dtype=np.int64)


def forward_backward_batch(sequences, params: HmmParams):
    """(gamma, xi over the three B moves, log p(X)) for equal-length sequences."""
    Xs = _stack(sequences)
    comp = compile_params(params, length=Xs.shape[1])
    return _kernels.batch_forward_backward(comp.log_E, comp.log_tr, comp.log_pi, Xs)


def marginal_batch(sequences, params: HmmParams, spec: SummarySpec,
                   d_init: int = DEFAULT_D_INIT, coverage_threshold: float = DEFAULT_COVERAGE,
                   d_cap: int = DEFAULT_D_CAP):
    """(p(v | X_i) dense, log p(X_i), width used, min coverage at l = 0)."""
    Xs = _stack(sequences)
    L = Xs.shape[1]
    comp = compile_params(params, spec, length=L)
    return _kernels.batch_marginal(comp.log_E, comp.log_tr, comp.log_pi, comp.inset,
                                   comp.pred, comp.succ, comp.alias_root, comp.alias_off,
                                   Xs, L, int(d_init), int(max(d_cap, d_init)),
                                   float(coverage_threshold))


def response_estep_batch(sequences, params: HmmParams, spec: SummarySpec, logpy: np.ndarray,
                         d_init: int = DEFAULT_D_INIT,
                         coverage_threshold: float = DEFAULT_COVERAGE,
                         d_cap: int = DEFAULT_D_CAP):
    Xs = _stack(sequences)
    comp = compile_params(params, spec, length=Xs.shape[1])
    logpy = np.ascontiguousarray(logpy, dtype=float)
    if logpy.shape != (Xs.shape[0], Xs.shape[1] + 1):
        raise InvalidArgumentError("logpy must be N x (L+1)")
    return _kernels.batch_response_estep(comp.log_E, comp.log_tr, comp.log_pi, comp.inset,
                                         comp.pred, comp.succ, comp.alias_root,
                                         comp.alias_off, Xs, logpy, int(d_init),
                                         int(max(d_cap, d_init)), float(coverage_threshold))

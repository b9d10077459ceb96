"""Prediction scores: MSE, Pearson correlation and AUROC with the 4-SD positives rule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError, UndefinedMetricError

MIN_POSITIVES = 50
POSITIVE_SDS = 4.0


def _pair(pred, obs):
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise InvalidArgumentError(f"length mismatch: {pred.size} predictions, {obs.size} observations")
    return pred, obs


def mse(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    if pred.size == 0:
        raise InvalidArgumentError("mse needs at least one value")
    d = pred - obs
    return float(np.dot(d, d) / d.size)


def pearson(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    if pred.size < 2:
        raise InvalidArgumentError("pearson needs at least two values")
    a = pred - pred.mean()
    b = obs - obs.mean()
    na = math.sqrt(np.dot(a, a))
    nb = math.sqrt(np.dot(b, b))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def define_positives(obs) -> np.ndarray:
    """Values above mean + 4 SD, topped up to the 50 largest (ties included)."""
    obs = np.asarray(obs, dtype=float).ravel()
    if obs.size < MIN_POSITIVES:
        raise InsufficientDataError(f"need at least {MIN_POSITIVES} observations, got {obs.size}")
    labels = obs > obs.mean() + POSITIVE_SDS * obs.std()
    if labels.sum() < MIN_POSITIVES:
        cutoff = np.sort(obs)[::-1][MIN_POSITIVES - 1]
        labels = obs >= cutoff
    return labels


def _midranks(x: np.ndarray) -> np.ndarray:
    _, inv, cnt = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(cnt)
    return (0.5 * (ends - cnt + 1 + ends))[inv]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    r = _midranks(scores)
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    n: int
    mse: float
    pearson: float | None
    auroc: float | None
    n_positives: int | None
    heldout_loglik_per_seq: float | None = None
    notes: dict | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate(pred, obs, heldout_loglik_per_seq: float | None = None) -> EvalReport:
    pred, obs = _pair(pred, obs)
    notes = {}
    try:
        rho = pearson(pred, obs)
    except (UndefinedMetricError, InvalidArgumentError) as exc:
        rho = None
        notes["pearson"] = str(exc)
    auc = n_pos = None
    try:
        labels = define_positives(obs)
        n_pos = int(labels.sum())
        auc = auroc(pred, labels)
    except (InsufficientDataError, UndefinedMetricError) as exc:
        notes["auroc"] = str(exc)
    return EvalReport(n=int(pred.size), mse=mse(pred, obs), pearson=rho, auroc=auc,
                      n_positives=n_pos, heldout_loglik_per_seq=heldout_loglik_per_seq,
                      notes=notes or None)

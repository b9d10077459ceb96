"""Dataset ingestion, synthetic data, model files and PWM export."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, InvalidArgumentError, ParseError, SchemaError, ValidationError
from .model import (ALPHABET, HmmParams, Link, RegressionParams, StateSpace, SummaryMode,
                    SummarySpec, encode, validate)
from .regression import link_eval

log = logging.getLogger(__name__)

MODEL_FORMAT = "reghmm-model"
MODEL_VERSION = 1
_SPLIT = re.compile(r"[\t,]|\s+")
_ACGT = re.compile(r"^[ACGT]+$")


@dataclass
class Dataset:
    sequences: list
    responses: np.ndarray
    provenance: str = ""
    transform: str = "none"
    dropped: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=float)
        if len(self.sequences) != len(self.responses):
            raise InvalidArgumentError("sequences and responses differ in length")
        if not np.all(np.isfinite(self.responses)):
            raise InvalidArgumentError("responses must be finite")
        self._X = None

    def __len__(self):
        return len(self.sequences)

    @property
    def y(self) -> np.ndarray:
        return self.responses

    @property
    def X(self) -> np.ndarray:
        """N x L integer matrix; requires a uniform sequence length."""
        if self._X is None:
            lengths = {len(s) for s in self.sequences}
            if len(lengths) > 1:
                raise InvalidArgumentError(f"sequences have mixed lengths {sorted(lengths)}")
            if not self.sequences:
                self._X = np.zeros((0, 0), dtype=np.int64)
            else:
                self._X = np.vstack([encode(s) for s in self.sequences])
        return self._X

    @property
    def L(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([self.sequences[i] for i in idx], self.responses[idx],
                       provenance=self.provenance, transform=self.transform)


def load_pbm_table(path, log_transform: bool = False, truncate_to: int | None = None) -> Dataset:
    """Read a two-column ``sequence, intensity`` table.

    Probes are kept from their first base (the free end in DREAM5 listings)
    when truncating.  Rows with non-ACGT symbols, non-finite intensities or,
    under the log transform, non-positive intensities are dropped and counted.
    """
    path = Path(path)
    if truncate_to is not None and truncate_to < 1:
        raise InvalidArgumentError("truncate_to must be positive")
    seqs, ys = [], []
    dropped = {"non_acgt": 0, "non_finite": 0, "non_positive": 0}
    with path.open(encoding="utf-8") as fh:
        first = True
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p for p in _SPLIT.split(text) if p]
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, found {len(parts)}", lineno)
            seq, raw = parts
            try:
                value = float(raw)
            except ValueError:
                if first:
                    first = False
                    continue
                raise ParseError(f"intensity {raw!r} is not a number", lineno) from None
            first = False
            seq = seq.upper()
            if truncate_to is not None:
                seq = seq[:truncate_to]
            if not _ACGT.match(seq):
                dropped["non_acgt"] += 1
                continue
            if not math.isfinite(value):
                dropped["non_finite"] += 1
                continue
            if log_transform:
                if value <= 0:
                    dropped["non_positive"] += 1
                    continue
                value = math.log(value)
            seqs.append(seq)
            ys.append(value)
    if sum(dropped.values()):
        log.info("dropped rows from %s: %s", path, dropped)
    if not seqs:
        raise EmptyDatasetError(f"no usable rows in {path}")
    return Dataset(seqs, np.array(ys), provenance=str(path),
                   transform="log" if log_transform else "none", dropped=dropped)


def save_table(dataset: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s, y in zip(dataset.sequences, dataset.responses):
            fh.write(f"{s}\t{float(y)!r}\n")


def simulate(params: HmmParams, gamma_params: RegressionParams, spec: SummarySpec,
             n: int, seed) -> Dataset:
    """Draw paths, symbols and responses from the generative model."""
    problems = validate(params)
    if problems:
        raise ValidationError(problems)
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = np.random.default_rng(seed)
    space = params.space
    S, L = space.n_states, params.L
    s1, a1 = space.entry_states
    succ = np.array([0] + [space.successor(z) for z in range(1, S)])
    pi = np.exp(params.log_initial)
    eff = params.effective_triples()

    Z = np.empty((n, L), dtype=np.int64)
    Z[:, 0] = rng.choice(S, size=n, p=pi / pi.sum())
    for l in range(1, L):
        prev = Z[:, l - 1]
        u = rng.random(n)
        bb, bs, _ = eff[l - 1]
        from_b = np.where(u < bb, 0, np.where(u < bb + bs, s1, a1))
        Z[:, l] = np.where(prev == 0, from_b, succ[prev])

    cum = np.cumsum(params.emissions, axis=1)
    cum[:, -1] = 1.0
    u = rng.random((n, L))
    X = (u[..., None] > cum[Z]).sum(axis=-1)
    v = spec.mask(space)[Z].sum(axis=1)
    mu = link_eval(gamma_params, v)
    y = mu + gamma_params.sigma * rng.standard_normal(n)
    seqs = ["".join(ALPHABET[c] for c in row) for row in X]
    ds = Dataset(seqs, y, provenance=f"simulate(seed={seed}, n={n})")
    ds.extras = {"paths": Z, "summaries": v, "means": np.asarray(mu, dtype=float)}
    ds._X = X.astype(np.int64)
    return ds


# -- model files ------------------------------------------------------------

_REQUIRED = ("K", "L", "position_dependent", "emissions", "transitions", "pi", "link",
             "alpha", "beta", "s", "t", "sigma", "summary_mode")


def model_to_dict(params: HmmParams, gamma: RegressionParams, spec: SummarySpec) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "K": params.K,
        "L": params.L,
        "position_dependent": params.position_dependent,
        "emissions": params.emissions.tolist(),
        "transitions": params.transitions.tolist(),
        "pi": params.initial.tolist(),
        "link": gamma.link.value,
        "alpha": gamma.alpha,
        "beta": gamma.beta,
        "s": gamma.s,
        "t": gamma.t,
        "sigma": gamma.sigma,
        "summary_mode": spec.mode.value,
    }


def model_from_dict(doc: dict):
    if doc.get("format", MODEL_FORMAT) != MODEL_FORMAT:
        raise SchemaError(f"not a model document: format={doc.get('format')!r}")
    version = doc.get("version", MODEL_VERSION)
    if version != MODEL_VERSION:
        raise SchemaError(f"unsupported model version {version}", version=version)
    for name in _REQUIRED:
        if name not in doc:
            raise SchemaError(f"missing field {name!r}", field=name, version=version)
    K = int(doc["K"])
    E = np.array(doc["emissions"], dtype=float)
    if E.ndim != 2 or E.shape[0] != 2 * K + 1:
        raise ValidationError([f"emissions: {E.shape[0] if E.ndim else 0} rows but K={K} "
                               f"requires {2 * K + 1}"])
    params = HmmParams(space=StateSpace(K), emissions=E,
                       transitions=np.array(doc["transitions"], dtype=float).reshape(-1, 3),
                       initial=np.array(doc["pi"], dtype=float),
                       position_dependent=bool(doc["position_dependent"]))
    if params.L != int(doc["L"]):
        raise ValidationError([f"transitions: {params.L - 1} rows but L={doc['L']}"])
    problems = validate(params)
    if problems:
        raise ValidationError(problems)
    gamma = RegressionParams(link=Link(doc["link"]), alpha=doc["alpha"], beta=doc["beta"],
                             s=doc["s"], t=doc["t"], sigma=doc["sigma"])
    return params, gamma, SummarySpec(SummaryMode(doc["summary_mode"]))


def dumps_model(params, gamma, spec) -> str:
    return json.dumps(model_to_dict(params, gamma, spec), indent=1)


def save_model(path, params: HmmParams, gamma: RegressionParams, spec: SummarySpec) -> None:
    Path(path).write_text(dumps_model(params, gamma, spec) + "\n", encoding="utf-8")


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("model file must hold a JSON object")
    return model_from_dict(doc)


# -- PWM export -------------------------------------------------------------

def _micro_round(row) -> list[int]:
    """Round a distribution to integer millionths that sum to exactly 1e6."""
    scaled = np.asarray(row, dtype=float) / np.sum(row) * 1_000_000
    base = np.floor(scaled).astype(int)
    short = 1_000_000 - int(base.sum())
    order = np.argsort(-(scaled - base), kind="stable")
    base[order[:short]] += 1
    return base.tolist()


def format_pwm(params: HmmParams, name: str = "reghmm") -> str:
    K = params.K
    bg = _micro_round(params.emissions[0])
    lines = [
        "MEME version 4",
        "",
        f"ALPHABET= {ALPHABET}",
        "",
        "strands: + -",
        "",
        "Background letter frequencies",
        " ".join(f"{ch} {b / 1e6:.6f}" for ch, b in zip(ALPHABET, bg)),
        "",
        f"MOTIF {name}",
        f"letter-probability matrix: alength= 4 w= {K}",
    ]
    for k in range(1, K + 1):
        row = _micro_round(params.emissions[params.space.sense(k)])
        lines.append(" ".join(f"{m / 1e6:.6f}" for m in row))
    return "\n".join(lines) + "\n"


def export_pwm(params: HmmParams, path, name: str = "reghmm") -> None:
    problems = validate(params)
    if problems:
        raise ValidationError(problems)
    Path(path).write_text(format_pwm(params, name), encoding="utf-8")

"""State space, parameter containers and structural constraints.

States are indexed as ``0 = B`` (background), ``1..K = s_1..s_K`` (sense
chain) and ``K+1..2K = a_1..a_K`` (antisense chain).  Nucleotides are
encoded ``A=0, C=1, G=2, T=3`` so that the complement of symbol ``b`` is
``3 - b`` and reflecting an emission row over complements is ``row[::-1]``.

Transitions are stored as one free triple per position ``l = 0..L-2``
(columns ``B->B, B->s_1, B->a_1``) describing the move from position ``l``
to ``l + 1``.  Every other transition is structural: ``s_k -> s_{k+1}``
and ``s_K -> B`` with probability one (same for the antisense chain).
A motif must fit completely inside the sequence, so entry at positions
where the chain would run off the end is masked out and its mass folded
into ``B->B``.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError, ValidationError

ALPHABET = "ACGT"
EMISSION_FLOOR = 1e-6
DEFAULT_ENTRY_RATE = 0.01

_CODE = np.full(256, 255, dtype=np.uint8)
for _i, _c in enumerate(ALPHABET):
    _CODE[ord(_c)] = _i
    _CODE[ord(_c.lower())] = _i


def encode(seq) -> np.ndarray:
    """Encode a nucleotide string (or pass through an integer array)."""
    if isinstance(seq, str):
        raw = np.frombuffer(seq.encode("ascii", errors="replace"), dtype=np.uint8)
        codes = _CODE[raw]
        if len(codes) == 0 or (codes == 255).any():
            raise InvalidArgumentError(f"not a non-empty ACGT sequence: {seq!r}")
        return codes.astype(np.int64)
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0 or arr.min() < 0 or arr.max() > 3:
        raise InvalidArgumentError("encoded sequence must be a non-empty 1-d array over 0..3")
    return arr


def decode(codes) -> str:
    return "".join(ALPHABET[int(c)] for c in codes)


def reverse_complement(seq: str) -> str:
    return seq.translate(str.maketrans("ACGT", "TGCA"))[::-1]


@dataclass(frozen=True)
class StateSpace:
    """Background state plus a sense and an antisense chain of length K."""

    K: int

    def __post_init__(self):
        if not isinstance(self.K, (int, np.integer)) or self.K < 1:
            raise InvalidArgumentError(f"motif length must be a positive integer, got {self.K!r}")

    @property
    def n_states(self) -> int:
        return 2 * self.K + 1

    B = 0

    def sense(self, k: int) -> int:
        """Index of s_k (1-based k)."""
        return k

    def antisense(self, k: int) -> int:
        return self.K + k

    def is_motif(self, z: int) -> bool:
        return 1 <= z <= 2 * self.K

    def chain_position(self, z: int) -> int:
        """1-based position of a motif state within its chain (0 for B)."""
        if z == 0:
            return 0
        return z if z <= self.K else z - self.K

    def complement(self, z: int) -> int:
        """Complement partner: s_k <-> a_{K+1-k}.  B maps to itself."""
        if z == 0:
            return 0
        k = self.chain_position(z)
        if z <= self.K:
            return self.antisense(self.K + 1 - k)
        return self.sense(self.K + 1 - k)

    def successor(self, z: int) -> int | None:
        """Deterministic chain successor; None for B (free choice)."""
        if z == 0:
            return None
        k = self.chain_position(z)
        if k == self.K:
            return 0
        return z + 1

    @property
    def entry_states(self) -> tuple[int, int]:
        return (self.sense(1), self.antisense(1))

    @property
    def exit_states(self) -> tuple[int, int]:
        return (self.sense(self.K), self.antisense(self.K))

    def names(self) -> list[str]:
        return (["B"] + [f"s{k}" for k in range(1, self.K + 1)]
                + [f"a{k}" for k in range(1, self.K + 1)])

    @cached_property
    def structural(self) -> np.ndarray:
        """S x S 0/1 matrix of transitions that are structurally possible."""
        S = self.n_states
        allowed = np.zeros((S, S), dtype=bool)
        allowed[0, 0] = True
        allowed[0, self.sense(1)] = True
        allowed[0, self.antisense(1)] = True
        for z in range(1, S):
            allowed[z, self.successor(z)] = True
        return allowed


def build_state_space(K: int) -> StateSpace:
    return StateSpace(int(K) if isinstance(K, (int, np.integer)) else K)


class SummaryMode(str, enum.Enum):
    ENTERING = "entering"
    EXITING = "exiting"
    ALL_BOUND = "all"


@dataclass(frozen=True)
class SummarySpec:
    mode: SummaryMode = SummaryMode.ALL_BOUND

    def __post_init__(self):
        object.__setattr__(self, "mode", SummaryMode(self.mode))

    def states(self, space: StateSpace) -> frozenset[int]:
        if self.mode is SummaryMode.ENTERING:
            return frozenset(space.entry_states)
        if self.mode is SummaryMode.EXITING:
            return frozenset(space.exit_states)
        return frozenset(range(1, space.n_states))

    def mask(self, space: StateSpace) -> np.ndarray:
        m = np.zeros(space.n_states, dtype=np.int64)
        m[list(self.states(space))] = 1
        return m


class Link(str, enum.Enum):
    LINEAR = "linear"
    TANH = "tanh"


@dataclass(frozen=True)
class RegressionParams:
    """Link function parameters and the shared response noise SD."""

    link: Link = Link.LINEAR
    alpha: float = 0.0
    beta: float = 1.0
    s: float = 1.0
    t: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        for name in ("alpha", "beta", "s", "t", "sigma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.sigma > 0:
            raise InvalidArgumentError(f"sigma must be positive, got {self.sigma}")

    def replace(self, **changes) -> "RegressionParams":
        values = dict(link=self.link, alpha=self.alpha, beta=self.beta,
                      s=self.s, t=self.t, sigma=self.sigma)
        values.update(changes)
        return RegressionParams(**values)


def _readonly(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HmmParams:
    """Emission matrix, per-position free transitions and initial distribution."""

    space: StateSpace
    emissions: np.ndarray
    transitions: np.ndarray
    initial: np.ndarray
    position_dependent: bool = True

    def __post_init__(self):
        object.__setattr__(self, "emissions", _readonly(self.emissions))
        tr = np.asarray(self.transitions, dtype=float)
        if tr.ndim == 1:
            tr = tr.reshape(1, 3)
        object.__setattr__(self, "transitions", _readonly(tr))
        object.__setattr__(self, "initial", _readonly(self.initial))
        object.__setattr__(self, "position_dependent", bool(self.position_dependent))

    @property
    def K(self) -> int:
        return self.space.K

    @property
    def L(self) -> int:
        return self.transitions.shape[0] + 1

    @property
    def n_states(self) -> int:
        return self.space.n_states

    def entry_allowed(self, pos: int) -> bool:
        """Whether a motif may start at (0-based) position ``pos``."""
        return pos + self.K <= self.L

    def effective_triples(self) -> np.ndarray:
        """Free transition triples with end-of-sequence masking applied."""
        tr = np.array(self.transitions, dtype=float)
        for l in range(tr.shape[0]):
            if not self.entry_allowed(l + 1):
                tr[l] = (1.0, 0.0, 0.0)
        return tr

    @cached_property
    def log_emissions(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.log(self.emissions)
        out.setflags(write=False)
        return out

    @cached_property
    def log_initial(self) -> np.ndarray:
        pi = np.array(self.initial, dtype=float)
        if not self.entry_allowed(0):
            pi[list(self.space.entry_states)] = 0.0
        with np.errstate(divide="ignore"):
            out = np.log(pi)
        out.setflags(write=False)
        return out

    @cached_property
    def log_transitions(self) -> np.ndarray:
        """(L-1, S, S) log transition tensor; -inf marks forbidden moves."""
        space = self.space
        S = space.n_states
        eff = self.effective_triples()
        out = np.full((self.L - 1, S, S), -np.inf)
        s1, a1 = space.entry_states
        with np.errstate(divide="ignore"):
            logs = np.log(eff)
        out[:, 0, 0] = logs[:, 0]
        out[:, 0, s1] = logs[:, 1]
        out[:, 0, a1] = logs[:, 2]
        for z in range(1, S):
            out[:, z, space.successor(z)] = 0.0
        out.setflags(write=False)
        return out

    def replace(self, **changes) -> "HmmParams":
        values = dict(space=self.space, emissions=self.emissions, transitions=self.transitions,
                      initial=self.initial, position_dependent=self.position_dependent)
        values.update(changes)
        return HmmParams(**values)


# -- emission tying ---------------------------------------------------------

def _normalize(row: np.ndarray) -> np.ndarray:
    total = row.sum()
    if abs(total - 1.0) > 1e-12:
        row = row / total
    return row


def floor_row(row: np.ndarray, floor: float = EMISSION_FLOOR) -> np.ndarray:
    """Normalize and lift every entry to at least ``floor``."""
    row = _normalize(np.asarray(row, dtype=float))
    if row.min() < floor:
        row = floor + (1.0 - row.size * floor) * row
    return row


def _space_from_rows(n_rows: int) -> StateSpace:
    if n_rows < 3 or n_rows % 2 == 0:
        raise InvalidArgumentError(f"emission matrix must have 2K+1 rows, got {n_rows}")
    return StateSpace((n_rows - 1) // 2)


def tie_from_counts(counts: np.ndarray, floor: float = EMISSION_FLOOR,
                    fallback: np.ndarray | None = None) -> np.ndarray:
    """Emission matrix maximizing the tied likelihood of expected counts.

    Counts of ``s_k`` and the complement-reflected counts of ``a_{K+1-k}``
    are pooled, normalized once and mirrored back onto the antisense row.
    Rows with no evidence fall back to ``fallback`` (if given) or uniform.
    """
    counts = np.asarray(counts, dtype=float)
    space = _space_from_rows(counts.shape[0])
    K = space.K
    out = np.empty_like(counts)

    def finish(pooled, z):
        if pooled.sum() <= 0:
            if fallback is not None:
                return floor_row(fallback[z], floor)
            return np.full(4, 0.25)
        return floor_row(pooled, floor)

    out[0] = finish(counts[0], 0)
    for k in range(1, K + 1):
        s = space.sense(k)
        a = space.complement(s)
        row = finish(counts[s] + counts[a][::-1], s)
        out[s] = row
        out[a] = row[::-1]
    return out


def tie_emissions(raw, floor: float = EMISSION_FLOOR) -> np.ndarray:
    """Enforce complementary emissions by averaging each complement pair.

    Each input row is normalized first; the sense row ``s_k`` becomes the
    average of itself and the complement-reflected ``a_{K+1-k}``, which is
    then floored and mirrored.  Idempotent.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 4:
        raise InvalidArgumentError("emission matrix must be S x 4")
    space = _space_from_rows(raw.shape[0])
    rows = np.array([_normalize(r) for r in raw])
    out = np.empty_like(rows)
    out[0] = floor_row(rows[0], floor)
    for k in range(1, space.K + 1):
        s = space.sense(k)
        a = space.complement(s)
        merged = floor_row(0.5 * (rows[s] + rows[a][::-1]), floor)
        out[s] = merged
        out[a] = merged[::-1]
    return out


# -- seeding ----------------------------------------------------------------

def most_frequent_kmer(sequences: Iterable[str], K: int) -> tuple[str, int]:
    """Most frequent K-mer counting both strands; ties go to the smallest."""
    counts: Counter[str] = Counter()
    for seq in sequences:
        for strand in (seq, reverse_complement(seq)):
            for i in range(len(strand) - K + 1):
                counts[strand[i:i + K]] += 1
    if not counts:
        raise InvalidArgumentError("no K-mers in corpus")
    best = max(counts.values())
    kmer = min(w for w, c in counts.items() if c == best)
    return kmer, best


def _as_strings(sequences) -> list[str]:
    out = []
    for s in sequences:
        out.append(s.upper() if isinstance(s, str) else "".join(ALPHABET[c] for c in encode(s)))
    return out


def most_enriched_kmer(sequences, y, K: int, min_count: int = 5) -> tuple[str, float]:
    """K-mer whose presence (either strand) shifts the mean response most.

    The score is the standardized difference between the mean response of
    sequences containing the K-mer and the overall mean, ``|z| * sqrt(n)``.
    K-mers present in fewer than ``min_count`` sequences are ignored; ties go
    to the lexicographically smallest K-mer.
    """
    seqs = _as_strings(sequences)
    y = np.asarray(y, dtype=float)
    if len(seqs) != len(y) or not seqs:
        raise InvalidArgumentError("need one response per sequence")
    sd = float(y.std())
    if sd == 0:
        raise InvalidArgumentError("responses are constant")
    weights = 4 ** np.arange(K - 1, -1, -1)
    sums = np.zeros(4 ** K)
    counts = np.zeros(4 ** K)
    for s, yi in zip(seqs, y):
        if len(s) < K:
            raise InvalidArgumentError(f"all sequences must have length >= K={K}")
        x = encode(s)
        win = np.lib.stride_tricks.sliding_window_view(x, K)
        fwd = win @ weights
        rev = (3 - win[:, ::-1]) @ weights
        present = np.unique(np.concatenate([fwd, rev]))
        sums[present] += yi
        counts[present] += 1
    ok = counts >= min_count
    if not ok.any():
        raise InvalidArgumentError("no K-mer occurs often enough")
    score = np.zeros_like(sums)
    score[ok] = np.abs(sums[ok] / counts[ok] - y.mean()) * np.sqrt(counts[ok]) / sd
    best = int(np.argmax(score))
    code = [(best // w) % 4 for w in weights]
    return decode(code), float(score[best])


def seed_emission_from_kmer(sequences, K: int, dominance: float,
                            floor: float = EMISSION_FLOOR, kmer: str | None = None) -> np.ndarray:
    """Emission matrix seeded from a K-mer, by default the corpus' most frequent one."""
    seqs = _as_strings(sequences)
    if not seqs:
        raise InvalidArgumentError("empty corpus")
    if K < 1:
        raise InvalidArgumentError("K must be positive")
    if any(len(s) < K for s in seqs):
        raise InvalidArgumentError(f"all sequences must have length >= K={K}")
    if not (0.25 < dominance < 1.0) or (1.0 - dominance) / 3.0 < floor:
        raise InvalidArgumentError(f"dominance must lie in (0.25, 1) above the floor, got {dominance}")
    for s in seqs:
        encode(s)
    if kmer is None:
        kmer, _ = most_frequent_kmer(seqs, K)
    elif len(kmer) != K:
        raise InvalidArgumentError(f"seed K-mer {kmer!r} does not have length {K}")
    encode(kmer)
    space = StateSpace(K)
    E = np.empty((space.n_states, 4))
    freq = np.bincount(np.concatenate([encode(s) for s in seqs]), minlength=4).astype(float)
    E[0] = freq / freq.sum()
    other = (1.0 - dominance) / 3.0
    for k, ch in enumerate(kmer.upper(), start=1):
        row = np.full(4, other)
        row[ALPHABET.index(ch)] = dominance
        E[space.sense(k)] = row
        E[space.complement(space.sense(k))] = row[::-1]
    return tie_emissions(E, floor)


def default_transitions(L: int, entry_rate: float = DEFAULT_ENTRY_RATE) -> np.ndarray:
    if L < 1:
        raise InvalidArgumentError("L must be positive")
    row = (1.0 - 2 * entry_rate, entry_rate, entry_rate)
    return np.tile(row, (L - 1, 1))


def default_initial(space: StateSpace, entry_rate: float = DEFAULT_ENTRY_RATE) -> np.ndarray:
    pi = np.zeros(space.n_states)
    pi[0] = 1.0 - 2 * entry_rate
    pi[list(space.entry_states)] = entry_rate
    return pi


def init_params(sequences, K: int, dominance: float = 0.7,
                entry_rate: float = DEFAULT_ENTRY_RATE,
                position_dependent: bool = True, kmer: str | None = None) -> HmmParams:
    """Seeded starting point for EM."""
    seqs = _as_strings(sequences)
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise InvalidArgumentError("sequences must share one length")
    L = lengths.pop()
    space = StateSpace(K)
    return HmmParams(space=space,
                     emissions=seed_emission_from_kmer(seqs, K, dominance, kmer=kmer),
                     transitions=default_transitions(L, entry_rate),
                     initial=default_initial(space, entry_rate),
                     position_dependent=position_dependent)


# -- validation -------------------------------------------------------------

def validate(params: HmmParams, floor: float = EMISSION_FLOOR, tol: float = 1e-12) -> list[str]:
    """List every violated invariant; empty iff the parameters are usable."""
    out: list[str] = []
    space = params.space
    S = space.n_states
    E = params.emissions
    if E.shape != (S, 4):
        out.append(f"emissions: shape {E.shape} != ({S}, 4) for K={space.K}")
        return out
    if not np.all(np.isfinite(E)):
        out.append("emissions: non-finite entries")
        return out
    for z, name in enumerate(space.names()):
        if abs(E[z].sum() - 1.0) > tol:
            out.append(f"emissions[{name}]: row sums to {E[z].sum():.15g}")
        if E[z].min() < floor * (1 - 1e-9):
            out.append(f"emissions[{name}]: entry {E[z].min():.3g} below floor {floor:g}")
    for k in range(1, space.K + 1):
        s = space.sense(k)
        a = space.complement(s)
        if np.max(np.abs(E[s] - E[a][::-1])) > tol:
            out.append(f"emissions[s{k}]/[a{space.K + 1 - k}]: complement tying violated")

    tr = params.transitions
    if tr.ndim != 2 or tr.shape[1] != 3:
        out.append(f"transitions: shape {tr.shape} is not (L-1, 3)")
    else:
        if params.L < space.K:
            out.append(f"transitions: sequence length L={params.L} shorter than K={space.K}")
        for l, row in enumerate(tr):
            if not np.all(np.isfinite(row)) or row.min() < 0 or row.max() > 1:
                out.append(f"transitions[l={l}]: entries outside [0, 1]")
            elif abs(row.sum() - 1.0) > tol:
                out.append(f"transitions[l={l}]: row sums to {row.sum():.15g}")
        if not params.position_dependent and len(tr) > 1 and np.ptp(tr, axis=0).max() > 0:
            out.append("transitions: position_dependent=False but rows differ")

    pi = params.initial
    if pi.shape != (S,):
        out.append(f"pi: shape {pi.shape} != ({S},)")
    else:
        names = space.names()
        if not np.all(np.isfinite(pi)) or pi.min() < 0:
            out.append("pi: negative or non-finite entries")
        if abs(pi.sum() - 1.0) > tol:
            out.append(f"pi: sums to {pi.sum():.15g}")
        for z in range(1, S):
            if space.chain_position(z) > 1 and pi[z] != 0:
                out.append(f"pi/{names[z]}: mass {pi[z]:.3g} on mid-chain state")
    return out


def check(params: HmmParams) -> HmmParams:
    """Raise ValidationError unless ``validate`` is clean."""
    problems = validate(params)
    if problems:
        raise ValidationError(problems)
    return params


__all__ = [
    "ALPHABET", "EMISSION_FLOOR", "DEFAULT_ENTRY_RATE", "encode", "decode", "reverse_complement",
    "StateSpace", "build_state_space", "SummaryMode", "SummarySpec", "Link", "RegressionParams",
    "HmmParams", "floor_row", "tie_from_counts", "tie_emissions", "most_frequent_kmer",
    "most_enriched_kmer",
    "seed_emission_from_kmer", "default_transitions", "default_initial", "init_params",
    "validate", "check",
]

"""observe.py – observables evaluated from the factored state.

Every quantity reduces to Tr(Aρ) = Σ λ_i v_i*(A v_i), so nothing larger than
an N×r block is formed. Werner states p·I/N + (1−p)ρ̂ are handled by the
``werner_*`` wrappers around the rank-r part ρ̂.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DimensionMismatchError, ObservableError
from spinsys import SparseHermitian, magnetization_operator
from states import LowRankState

logger = logging.getLogger("lrei.observe")

IMAG_TOL = 1e-10
DENSITY_TOL = 1e-10

SIGMA_YY = np.kron(np.array([[0, -1j], [1j, 0]]), np.array([[0, -1j], [1j, 0]]))

Pair = Tuple[int, int]


# ─── TYPES ─────────────────────────────────────────────────
class PairMeasure(NamedTuple):
    concurrence: Optional[float] = None
    negativity: Optional[float] = None


@dataclass(frozen=True)
class ObservableRecord:
    t: float
    energy: Optional[float] = None
    magnetization: Optional[Tuple[float, float, float]] = None
    pair_measures: Dict[Pair, PairMeasure] = field(default_factory=dict)
    trace: float = 1.0
    purity: float = 1.0
    ritz_drift: float = 0.0

    def value(self, selector: "Selector") -> float:
        kind = selector.kind
        if kind == "energy":
            return self.energy
        if kind in ("mx", "my", "mz"):
            return self.magnetization["xyz".index(kind[1])]
        if kind == "trace":
            return self.trace
        if kind == "purity":
            return self.purity
        return getattr(self.pair_measures[selector.pair], kind)

    def row(self, selectors: Sequence["Selector"]) -> List[float]:
        return [self.value(s) for s in selectors]


@dataclass(frozen=True)
class ReducedDensity2:
    matrix: np.ndarray
    sites: Pair

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=np.complex128)
        if R.shape != (4, 4):
            raise DimensionMismatchError(f"two-spin density must be 4×4, got {R.shape}")
        herm = np.abs(R - R.conj().T).max()
        if herm > DENSITY_TOL:
            raise ObservableError(f"reduced density {self.sites} not Hermitian (error {herm:.2e})")
        R = (R + R.conj().T) / 2
        tr = np.trace(R).real
        if abs(tr - 1) > DENSITY_TOL:
            raise ObservableError(f"reduced density {self.sites} has trace {tr!r}")
        low = np.linalg.eigvalsh(R)[0]
        if low < -DENSITY_TOL:
            raise ObservableError(f"reduced density {self.sites} has eigenvalue {low:.3e} < 0")
        object.__setattr__(self, "matrix", R)


# ─── PRIMITIVES ────────────────────────────────────────────
def _check_dim(A: SparseHermitian, state: LowRankState) -> None:
    if A.dim != state.dim:
        raise DimensionMismatchError(f"operator has dim {A.dim}, state has dim {state.dim}")


def _weighted_trace(matrix: sp.spmatrix, state: LowRankState) -> complex:
    """Σ λ_i v_i*(A v_i), A applied to the factor block first."""
    AV = matrix @ state.V
    return complex(np.einsum("ij,ij->j", state.V.conj(), AV) @ state.lam)


def expectation(A: SparseHermitian, state: LowRankState) -> float:
    _check_dim(A, state)
    val = _weighted_trace(A.matrix, state)
    if abs(val.imag) > IMAG_TOL * max(1.0, abs(val.real)):
        logger.warning("⚠️ expectation has imaginary residue %.3e", val.imag)
    return val.real


def factor_trace(state: LowRankState) -> float:
    """Σ λ_i ‖v_i‖², the trace as reconstructed from the factors."""
    return float(np.sum(state.lam * np.sum(np.abs(state.V) ** 2, axis=0)))


def trace_power(state: LowRankState, m: int) -> float:
    if m < 1:
        raise ValueError(f"trace power needs m ≥ 1, got {m}")
    return float(np.sum(state.lam ** m))


@lru_cache(maxsize=64)
def pair_matrix_units(n: int, k: int, l: int) -> Tuple[Tuple[sp.csr_matrix, ...], ...]:
    """units[a][b] = (|b⟩⟨a| on sites (k,l)) ⊗ identity elsewhere, each with 2^(n−2) entries."""
    N = 2 ** n
    x = np.arange(N)
    bk, bl = (x >> (n - k)) & 1, (x >> (n - l)) & 1
    rest = x & ~((1 << (n - k)) | (1 << (n - l)))
    units = []
    for a in range(4):
        mask = (bk == a >> 1) & (bl == a & 1)
        cols, base = x[mask], rest[mask]
        row_units = []
        for b in range(4):
            rows = base | ((b >> 1) << (n - k)) | ((b & 1) << (n - l))
            row_units.append(sp.csr_matrix(
                (np.ones(cols.size, dtype=np.complex128), (rows, cols)), shape=(N, N)))
        units.append(tuple(row_units))
    return tuple(units)


def _pair_matrix(state: LowRankState, k: int, l: int) -> np.ndarray:
    n = state.n_sites
    if k == l:
        raise ValueError(f"reduced density needs two distinct sites, got ({k},{l})")
    for s in (k, l):
        if not 1 <= s <= n:
            raise ValueError(f"site {s} outside 1..{n}")
    units = pair_matrix_units(n, k, l)
    R = np.empty((4, 4), dtype=np.complex128)
    for a in range(4):
        for b in range(4):
            R[a, b] = _weighted_trace(units[a][b], state)
    return R


def reduced_density_2spin(state: LowRankState, k: int, l: int) -> ReducedDensity2:
    return ReducedDensity2(_pair_matrix(state, k, l), (k, l))


def concurrence(R: ReducedDensity2) -> float:
    w, U = np.linalg.eigh(R.matrix)
    sqrt_r = (U * np.sqrt(np.clip(w, 0, None))) @ U.conj().T
    flipped = SIGMA_YY @ R.matrix.conj() @ SIGMA_YY
    M = sqrt_r @ flipped @ sqrt_r
    mu = np.linalg.eigvalsh((M + M.conj().T) / 2)[::-1]
    if mu[-1] < -DENSITY_TOL:
        raise ObservableError(f"spin-flipped product has eigenvalue {mu[-1]:.3e} < 0")
    s = np.sqrt(np.clip(mu, 0, None))
    return float(np.clip(s[0] - s[1] - s[2] - s[3], 0.0, 1.0))


def negativity(R: ReducedDensity2) -> float:
    pt = R.matrix.reshape(2, 2, 2, 2).transpose(0, 3, 2, 1).reshape(4, 4)
    ev = np.linalg.eigvalsh((pt + pt.conj().T) / 2)
    return float(max(0.0, (np.abs(ev).sum() - 1) / 2))


# ─── WERNER WRAPPERS ───────────────────────────────────────
def werner_expectation(A: SparseHermitian, state: LowRankState, p: float) -> float:
    return p * A.trace().real / A.dim + (1 - p) * expectation(A, state)


def werner_reduced_density(state: LowRankState, p: float, k: int, l: int) -> ReducedDensity2:
    R = p * np.eye(4) / 4 + (1 - p) * _pair_matrix(state, k, l)
    return ReducedDensity2(R, (k, l))


def werner_trace_power(state: LowRankState, p: float, m: int) -> float:
    """Σ of the m-th powers of the Werner spectrum {(1−p)λ_i + p/N} ∪ {p/N}."""
    if m < 1:
        raise ValueError(f"trace power needs m ≥ 1, got {m}")
    N, r = state.dim, state.rank
    return float(np.sum(((1 - p) * state.lam + p / N) ** m) + (N - r) * (p / N) ** m)


# ─── SELECTION ─────────────────────────────────────────────
_PAIR_SELECTOR = re.compile(r"^(concurrence|negativity):\s*(\d+)\s*,\s*(\d+)$")
SCALAR_SELECTORS = ("energy", "mx", "my", "mz", "trace", "purity")


@dataclass(frozen=True)
class Selector:
    kind: str
    pair: Optional[Pair] = None

    @property
    def column(self) -> str:
        if self.pair is None:
            return self.kind
        return f"{self.kind}_{self.pair[0]}_{self.pair[1]}"


def parse_selector(text: str, n_sites: Optional[int] = None) -> Selector:
    s = text.strip().lower()
    if s in SCALAR_SELECTORS:
        return Selector(s)
    m = _PAIR_SELECTOR.match(s)
    if not m:
        raise ValueError(f"unknown observable {text!r}; expected one of {SCALAR_SELECTORS} "
                         f"or concurrence:k,l / negativity:k,l")
    k, l = int(m.group(2)), int(m.group(3))
    if k == l:
        raise ValueError(f"observable {text!r} needs two distinct sites")
    if n_sites is not None and not (1 <= k <= n_sites and 1 <= l <= n_sites):
        raise ValueError(f"observable {text!r} names a site outside 1..{n_sites}")
    return Selector(m.group(1), (k, l))


def split_selectors(text: str) -> List[str]:
    """Split a selector list on ';' or whitespace; commas belong to pair selectors."""
    compact = re.sub(r"\s*([:,])\s*", r"\1", text.strip())
    return [p for p in re.split(r"[;\s]+", compact) if p]


class Probe:
    """Callable turning (t, state) into an ObservableRecord for the chosen selectors."""

    def __init__(self, H: SparseHermitian, selectors: Iterable[Selector] = (),
                 werner_p: Optional[float] = None, hbar: float = 1.0):
        self.H = H
        self.n_sites = H.n_sites
        self.selectors = tuple(selectors)
        self.werner_p = werner_p
        self.hbar = hbar
        kinds = {s.kind for s in self.selectors}
        self._mag = None
        if kinds & {"mx", "my", "mz"}:
            self._mag = [magnetization_operator(a, self.n_sites, hbar) for a in "xyz"]
        self._pairs = sorted({s.pair for s in self.selectors if s.pair is not None})
        self._kinds = kinds

    @property
    def columns(self) -> List[str]:
        return [s.column for s in self.selectors]

    def _expect(self, A: SparseHermitian, state: LowRankState) -> float:
        if self.werner_p is None:
            return expectation(A, state)
        return werner_expectation(A, state, self.werner_p)

    def _density(self, state: LowRankState, k: int, l: int) -> ReducedDensity2:
        if self.werner_p is None:
            return reduced_density_2spin(state, k, l)
        return werner_reduced_density(state, self.werner_p, k, l)

    def __call__(self, t: float, state: LowRankState, ritz_drift: float = 0.0) -> ObservableRecord:
        energy = self._expect(self.H, state) if "energy" in self._kinds else None
        mag = tuple(self._expect(M, state) for M in self._mag) if self._mag else None

        pairs: Dict[Pair, PairMeasure] = {}
        for k, l in self._pairs:
            R = self._density(state, k, l)
            want = {s.kind for s in self.selectors if s.pair == (k, l)}
            pairs[(k, l)] = PairMeasure(
                concurrence(R) if "concurrence" in want else None,
                negativity(R) if "negativity" in want else None,
            )

        trace = factor_trace(state)
        if self.werner_p is None:
            purity = trace_power(state, 2)
        else:
            p = self.werner_p
            trace = p + (1 - p) * trace
            purity = werner_trace_power(state, p, 2)
        return ObservableRecord(t, energy, mag, pairs, trace, purity, ritz_drift)

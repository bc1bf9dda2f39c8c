"""states.py – pure and mixed initial states in factored form.

Low-rank states are kept as (V, lam): an N×r orthonormal factor and r
positive eigenvalues, sorted descending, summing to one.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import settings
from errors import StateError
from lowrank import normalize_phase

logger = logging.getLogger("lrei.states")

NORM_TOL = 1e-12
ORTHO_TOL = 1e-12
TRACE_TOL = 1e-12

ATOMS = ("af1", "af2", "ghz", "w")


# ─── TYPES ─────────────────────────────────────────────────
@dataclass(frozen=True)
class PureState:
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if amps.ndim != 1:
            raise StateError(f"amplitudes must be a vector, got shape {amps.shape}")
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > NORM_TOL:
            raise StateError(f"state {self.label or '?'} has norm {norm!r}, expected 1")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def normalized(cls, amplitudes: np.ndarray, label: str = "") -> "PureState":
        amps = np.asarray(amplitudes, dtype=np.complex128)
        norm = np.linalg.norm(amps)
        if norm == 0:
            raise StateError("cannot normalize the zero vector")
        return cls(amps / norm, label)

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]


@dataclass(frozen=True)
class LowRankState:
    V: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.V, dtype=np.complex128)
        lam = np.asarray(self.lam, dtype=np.float64)
        if V.ndim != 2 or lam.ndim != 1 or V.shape[1] != lam.shape[0]:
            raise StateError(f"factor shape {V.shape} does not match spectrum shape {lam.shape}")
        if lam.size == 0:
            raise StateError("a state needs at least one eigenpair")
        if np.any(lam <= 0):
            raise StateError(f"eigenvalues must be strictly positive, got {lam}")
        if np.any(np.diff(lam) > 0):
            raise StateError(f"eigenvalues must be sorted descending, got {lam}")
        if abs(lam.sum() - 1.0) > TRACE_TOL:
            raise StateError(f"eigenvalues sum to {lam.sum()!r}, expected 1")
        gram = V.conj().T @ V
        err = np.abs(gram - np.eye(lam.size)).max()
        if err > ORTHO_TOL:
            raise StateError(f"factor columns are not orthonormal (error {err:.2e})")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def pure(cls, psi: PureState) -> "LowRankState":
        return cls(normalize_phase(psi.amplitudes[:, None]), np.ones(1))

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.lam.shape[0]

    @property
    def n_sites(self) -> int:
        return int(round(np.log2(self.dim)))

    def with_factor(self, V: np.ndarray) -> "LowRankState":
        return LowRankState(V, self.lam)

    def to_dense(self) -> np.ndarray:
        settings.check_dense(self.dim)
        return (self.V * self.lam) @ self.V.conj().T


class InitialState(NamedTuple):
    state: LowRankState
    werner_p: Optional[float]
    label: str


# ─── BUILDERS ──────────────────────────────────────────────
def _check_n(n: int, minimum: int = 1) -> int:
    if n < minimum:
        raise StateError(f"need at least {minimum} site(s), got {n}")
    settings.check_sites(n)
    return 2 ** n


def basis_state(index: int, n: int) -> PureState:
    """Computational basis vector e_index, 1-based."""
    dim = _check_n(n)
    if not 1 <= index <= dim:
        raise StateError(f"basis index {index} outside 1..{dim}")
    amps = np.zeros(dim, dtype=np.complex128)
    amps[index - 1] = 1.0
    return PureState(amps, f"basis:{index}")


def af_state(variant: int, n: int) -> PureState:
    if variant not in (1, 2):
        raise StateError(f"antiferromagnetic variant must be 1 or 2, got {variant}")
    _check_n(n)
    first = "0" if variant == 1 else "1"
    other = "1" if variant == 1 else "0"
    bits = "".join(first if i % 2 == 0 else other for i in range(n))
    psi = basis_state(int(bits, 2) + 1, n)
    return PureState(psi.amplitudes, f"af{variant}")


def ghz_state(n: int) -> PureState:
    dim = _check_n(n, 2)
    amps = np.zeros(dim, dtype=np.complex128)
    amps[0] = amps[-1] = 1 / np.sqrt(2)
    return PureState(amps, "ghz")


def w_state(n: int) -> PureState:
    dim = _check_n(n, 2)
    amps = np.zeros(dim, dtype=np.complex128)
    # site i excited <=> bit (n - i) set
    amps[[1 << (n - i) for i in range(1, n + 1)]] = 1 / np.sqrt(n)
    return PureState(amps, "w")


def mix(components: Sequence[PureState], weights: Sequence[float]) -> LowRankState:
    """Σ w_k |ψ_k⟩⟨ψ_k| through the eigenproblem on the orthonormalized span."""
    if len(components) == 0 or len(components) != len(weights):
        raise StateError("mix needs one weight per component and at least one component")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise StateError(f"mixing weights must be positive, got {list(weights)}")
    if abs(w.sum() - 1.0) > TRACE_TOL:
        raise StateError(f"mixing weights sum to {w.sum()!r}, expected 1")
    dims = {psi.dim for psi in components}
    if len(dims) != 1:
        raise StateError(f"components have different dimensions {sorted(dims)}")

    A = np.stack([psi.amplitudes for psi in components], axis=1)
    Q, R = np.linalg.qr(A)
    small = (R * w) @ R.conj().T
    vals, vecs = np.linalg.eigh((small + small.conj().T) / 2)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]

    keep = vals > settings.RANK_TOL * vals[0]
    if keep.sum() < len(components):
        logger.warning("⚠️ mixture of %d components has rank %d; dropped eigenvalues %s",
                       len(components), keep.sum(), vals[~keep])
    vals = vals[keep]
    V = normalize_phase(Q @ vecs[:, keep])
    return LowRankState(V, vals / vals.sum())


def werner_split(psi: PureState, p: float) -> Tuple[LowRankState, float]:
    """Split p·I/N + (1−p)|ψ⟩⟨ψ| into the evolving rank-1 part and its weight."""
    if not 0 < p < 1:
        raise StateError(f"Werner weight must lie in (0, 1), got {p}")
    return LowRankState.pure(psi), float(p)


# ─── MINI-LANGUAGE ─────────────────────────────────────────
_ATOM_RE = re.compile(r"^(af1|af2|ghz|w|basis:\s*\d+)$")
_PAIR_RE = re.compile(r"\(\s*([^(),]+?)\s*,\s*([^(),]+?)\s*\)")


@dataclass(frozen=True)
class StateSpec:
    """Parsed initial-state expression; nothing is allocated until ``build``."""
    kind: str                               # pure | mix | werner
    atoms: Tuple[Tuple[str, float], ...]
    p: Optional[float] = None
    text: str = ""

    @property
    def max_rank(self) -> int:
        return len(self.atoms) if self.kind == "mix" else 1

    def check(self, n: int) -> None:
        for atom, _ in self.atoms:
            if atom in ("ghz", "w") and n < 2:
                raise StateError(f"{atom} needs at least 2 sites, got {n}")
            if atom.startswith("basis:"):
                idx = int(atom.split(":", 1)[1])
                if not 1 <= idx <= 2 ** n:
                    raise StateError(f"basis index {idx} outside 1..{2 ** n}")
        distinct = {atom for atom, _ in self.atoms}
        if len(distinct) >= 2 ** n:
            raise StateError(f"mixture of {len(distinct)} states can reach full rank on {n} sites; "
                             f"rank must stay below {2 ** n}")

    def build(self, n: int) -> InitialState:
        self.check(n)
        if self.kind == "pure":
            psi = pure_atom(self.atoms[0][0], n)
            return InitialState(LowRankState.pure(psi), None, psi.label)
        if self.kind == "werner":
            state, p = werner_split(pure_atom(self.atoms[0][0], n), self.p)
            return InitialState(state, p, self.text)
        comps = [pure_atom(a, n) for a, _ in self.atoms]
        return InitialState(mix(comps, [wt for _, wt in self.atoms]), None, self.text)


def pure_atom(atom: str, n: int) -> PureState:
    atom = atom.replace(" ", "")
    if atom == "af1":
        return af_state(1, n)
    if atom == "af2":
        return af_state(2, n)
    if atom == "ghz":
        return ghz_state(n)
    if atom == "w":
        return w_state(n)
    if atom.startswith("basis:"):
        return basis_state(int(atom.split(":", 1)[1]), n)
    raise StateError(f"unknown pure state {atom!r} (expected one of {ATOMS} or basis:<index>)")


def _atom(text: str) -> str:
    atom = text.strip().lower()
    if not _ATOM_RE.match(atom):
        raise StateError(f"unknown pure state {text!r} (expected one of {ATOMS} or basis:<index>)")
    return atom.replace(" ", "")


def _number(text: str, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise StateError(f"{what} {text!r} is not a number") from None
    if not np.isfinite(value):
        raise StateError(f"{what} must be finite")
    return value


def parse_state_spec(text: str) -> StateSpec:
    """Parse ``af1``, ``basis:5``, ``mix:[(af2,0.75),(ghz,0.25)]`` or ``werner:(ghz,0.5)``."""
    raw = (text or "").strip()
    low = raw.lower()
    if low.startswith("mix:"):
        body = raw[4:].strip()
        if not (body.startswith("[") and body.endswith("]")):
            raise StateError(f"mix expects a bracketed list of (state, weight) pairs: {raw!r}")
        pairs = _PAIR_RE.findall(body[1:-1])
        leftover = _PAIR_RE.sub("", body[1:-1]).replace(",", "").strip()
        if not pairs or leftover:
            raise StateError(f"cannot parse mixture {raw!r}")
        atoms: List[Tuple[str, float]] = [(_atom(a), _number(wt, "weight")) for a, wt in pairs]
        total = sum(wt for _, wt in atoms)
        if any(wt <= 0 for _, wt in atoms) or abs(total - 1.0) > TRACE_TOL:
            raise StateError(f"mixture weights must be positive and sum to 1, got {total!r}")
        return StateSpec("mix", tuple(atoms), None, raw)
    if low.startswith("werner:"):
        m = _PAIR_RE.fullmatch(raw[7:].strip())
        if not m:
            raise StateError(f"werner expects (state, p): {raw!r}")
        p = _number(m.group(2), "Werner weight")
        if not 0 < p < 1:
            raise StateError(f"Werner weight must lie in (0, 1), got {p}")
        return StateSpec("werner", ((_atom(m.group(1)), 1.0),), p, raw)
    return StateSpec("pure", ((_atom(raw), 1.0),), None, raw)


def build_initial_state(text: str, n: int) -> InitialState:
    return parse_state_spec(text).build(n)

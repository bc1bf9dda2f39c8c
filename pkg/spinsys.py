"""spinsys.py – sparse spin-1/2 operators and lattice Hamiltonians.

Basis convention: site 1 is the most significant bit of the computational
basis index, matching the Kronecker order I ⊗ … ⊗ σ ⊗ … ⊗ I.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

import settings
from errors import DimensionMismatchError

logger = logging.getLogger("lrei.spinsys")

AXES = ("x", "y", "z")

PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}

Edge = Tuple[int, int]
Vec3 = Tuple[float, float, float]


# ─── LATTICES ──────────────────────────────────────────────
@dataclass(frozen=True)
class SpinLattice:
    n_sites: int
    edges: Tuple[Edge, ...]
    preset: str = "custom"
    periodic: bool = False

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError(f"n_sites must be positive, got {self.n_sites}")
        if self.preset not in ("chain", "triangular", "custom"):
            raise ValueError(f"unknown lattice preset {self.preset!r}")
        seen = set()
        for i, j in self.edges:
            if not (1 <= i <= self.n_sites and 1 <= j <= self.n_sites):
                raise ValueError(f"edge ({i},{j}) outside sites 1..{self.n_sites}")
            if i == j:
                raise ValueError(f"self-loop at site {i}")
            if i > j:
                raise ValueError(f"edge ({i},{j}) must be stored with i<j")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i},{j})")
            seen.add((i, j))

    @classmethod
    def custom(cls, n_sites: int, edges: Iterable[Sequence[int]]) -> "SpinLattice":
        return cls(n_sites, _normalize_edges(edges), "custom", False)


def _normalize_edges(pairs: Iterable[Sequence[int]]) -> Tuple[Edge, ...]:
    out = []
    seen = set()
    for a, b in pairs:
        a, b = int(a), int(b)
        if a == b:
            continue
        e = (min(a, b), max(a, b))
        if e not in seen:
            seen.add(e)
            out.append(e)
    return tuple(out)


def chain(n: int, periodic: bool = False) -> SpinLattice:
    pairs = [(i, i + 1) for i in range(1, n)]
    if periodic and n > 2:
        pairs.append((1, n))
    return SpinLattice(n, _normalize_edges(pairs), "chain", periodic)


def triangular(rows: int, cols: int, periodic: bool = False) -> SpinLattice:
    """Rows×cols patch of the triangular lattice: right, down and down-right bonds."""
    if rows < 1 or cols < 1:
        raise ValueError("triangular lattice needs rows, cols >= 1")

    def site(r: int, c: int) -> Optional[int]:
        if periodic:
            r, c = r % rows, c % cols
        elif r >= rows or c >= cols:
            return None
        return r * cols + c + 1

    pairs = []
    for r, c in itertools.product(range(rows), range(cols)):
        here = site(r, c)
        for dr, dc in ((0, 1), (1, 0), (1, 1)):
            other = site(r + dr, c + dc)
            if other is not None:
                pairs.append((here, other))
    return SpinLattice(rows * cols, _normalize_edges(pairs), "triangular", periodic)


# ─── OPERATORS ─────────────────────────────────────────────
@dataclass(frozen=True)
class SparseHermitian:
    """Immutable CSR operator of dimension 2**n."""
    matrix: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def n_sites(self) -> int:
        return int(round(np.log2(self.dim)))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.dim:
            raise DimensionMismatchError(f"operator has dim {self.dim}, vector has {x.shape[0]}")
        return self.matrix @ x

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return self.matvec(x)

    def trace(self) -> complex:
        return complex(self.matrix.diagonal().sum())

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def hermiticity_error(self) -> float:
        diff = self.matrix - self.matrix.conj().T
        return float(np.abs(diff.data).max()) if diff.nnz else 0.0


def _finalize(acc: sp.spmatrix) -> SparseHermitian:
    m = sp.csr_matrix(acc, dtype=np.complex128)
    m.sum_duplicates()
    m.data[np.abs(m.data) < settings.PRUNE_TOL] = 0
    m.eliminate_zeros()
    return SparseHermitian(m)


def _site_factor(op: np.ndarray, site: int, n: int) -> sp.csr_matrix:
    """I_{2^(site-1)} ⊗ op ⊗ I_{2^(n-site)} as CSR."""
    left = sp.identity(2 ** (site - 1), dtype=np.complex128, format="csr")
    right = sp.identity(2 ** (n - site), dtype=np.complex128, format="csr")
    return sp.kron(sp.kron(left, sp.csr_matrix(op), format="csr"), right, format="csr")


def _check_site(site: int, n: int) -> None:
    if n < 1:
        raise ValueError(f"site count must be positive, got {n}")
    if not 1 <= site <= n:
        raise ValueError(f"site {site} outside 1..{n}")


def spin_operator(site: int, axis: str, n: int, hbar: float = 1.0) -> SparseHermitian:
    _check_site(site, n)
    if axis not in PAULI:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    settings.check_sites(n)
    return SparseHermitian(_site_factor(0.5 * hbar * PAULI[axis], site, n))


def _two_site_term(i: int, j: int, coeffs: Mapping[Tuple[str, str], complex], n: int) -> sp.csr_matrix:
    """Σ c_ab S_i^a S_j^b with spin-1/2 matrices (hbar folded into coeffs)."""
    acc = None
    for (a, b), c in coeffs.items():
        if c == 0:
            continue
        term = c * (_site_factor(0.5 * PAULI[a], i, n) @ _site_factor(0.5 * PAULI[b], j, n))
        acc = term if acc is None else acc + term
    return acc


@dataclass(frozen=True)
class HamiltonianParams:
    J: float = 1.0
    dmi: Dict[Edge, Vec3] = field(default_factory=dict)
    b_field: Vec3 = (0.0, 0.0, 0.0)
    mu: Optional[float] = None
    hbar: float = settings.HBAR_MEV_PS

    def __post_init__(self):
        values = [self.J, self.hbar, *self.b_field] + [v for d in self.dmi.values() for v in d]
        if self.mu is not None:
            values.append(self.mu)
        if not np.all(np.isfinite(values)):
            raise ValueError("Hamiltonian parameters must be finite")
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")
        for i, j in self.dmi:
            if i >= j:
                raise ValueError(f"DMI vectors are stored for i<j only, got ({i},{j})")

    @property
    def gyromagnetic(self) -> float:
        return settings.gyromagnetic(self.hbar) if self.mu is None else self.mu

    @classmethod
    def uniform(cls, lattice: SpinLattice, J: float, d: Vec3, b_field: Vec3,
                hbar: float, mu: Optional[float] = None) -> "HamiltonianParams":
        """Same DMI vector d_ij = d on every stored edge (i<j)."""
        dmi = {e: tuple(float(v) for v in d) for e in lattice.edges} if any(d) else {}
        return cls(J=J, dmi=dmi, b_field=tuple(b_field), mu=mu, hbar=hbar)


def build_hamiltonian(lattice: SpinLattice, params: HamiltonianParams) -> SparseHermitian:
    """H = (2J/ħ²)Σ S_i·S_j + (2/ħ²)Σ d_ij·(S_i×S_j) − μ Σ b·S_i, edges counted once."""
    n = lattice.n_sites
    settings.check_sites(n)
    hbar = params.hbar
    # S/ħ = σ/2 in the bond products, so the 1/ħ² prefactors drop out
    scale = 2.0
    acc = sp.csr_matrix((2 ** n, 2 ** n), dtype=np.complex128)

    for i, j in lattice.edges:
        coeffs: Dict[Tuple[str, str], complex] = {(a, a): scale * params.J for a in AXES}
        d = params.dmi.get((i, j))
        if d is not None:
            dx, dy, dz = d
            # d·(S_i×S_j) = dx(SySz−SzSy) + dy(SzSx−SxSz) + dz(SxSy−SySx)
            for (a, b), c in {("y", "z"): dx, ("z", "y"): -dx,
                              ("z", "x"): dy, ("x", "z"): -dy,
                              ("x", "y"): dz, ("y", "x"): -dz}.items():
                coeffs[(a, b)] = coeffs.get((a, b), 0) + scale * c
        acc = acc + _two_site_term(i, j, coeffs, n)

    mu = params.gyromagnetic
    for axis, b in zip(AXES, params.b_field):
        if b == 0:
            continue
        for site in range(1, n + 1):
            acc = acc - (mu * b * 0.5 * hbar) * _site_factor(PAULI[axis], site, n)

    H = _finalize(acc)
    logger.debug("Hamiltonian: n=%d edges=%d nnz=%d", n, len(lattice.edges), H.nnz)
    return H


def magnetization_operator(axis: str, n: int, hbar: float = 1.0) -> SparseHermitian:
    """M_v = (1/n) Σ_i S_i^v."""
    if n < 1:
        raise ValueError(f"site count must be positive, got {n}")
    if axis not in PAULI:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    settings.check_sites(n)
    acc = sp.csr_matrix((2 ** n, 2 ** n), dtype=np.complex128)
    for site in range(1, n + 1):
        acc = acc + _site_factor((0.5 * hbar / n) * PAULI[axis], site, n)
    return _finalize(acc)

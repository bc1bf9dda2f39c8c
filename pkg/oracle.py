"""oracle.py – dense reference solvers for small systems.

O(N³) per step; every entry point is guarded by ``settings.check_dense``.
Used by the test-suite, by ``converge`` as the reference and by the
``ENGINE = dense`` run mode.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

import settings
from dynamics import Model, ModelKind
from errors import StateError
from integrate import RKTableau, RunStats, Trajectory, step_grid
from lowrank import normalize_phase
from observe import ObservableRecord, Probe
from spinsys import SparseHermitian
from states import LowRankState, PureState

logger = logging.getLogger("lrei.oracle")

EXPM_DENSE_MAX = 2 ** 8
HERM_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10


@dataclass(frozen=True)
class DenseState:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.complex128)
        settings.check_dense(rho.shape[0])
        herm = np.abs(rho - rho.conj().T).max()
        if herm > HERM_TOL:
            raise StateError(f"density matrix not Hermitian (error {herm:.2e})")
        rho = (rho + rho.conj().T) / 2
        tr = np.trace(rho).real
        if abs(tr - 1) > TRACE_TOL:
            raise StateError(f"density matrix has trace {tr!r}")
        low = np.linalg.eigvalsh(rho)[0]
        if low < -PSD_TOL:
            raise StateError(f"density matrix has eigenvalue {low:.3e} < 0")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_low_rank(cls, state: LowRankState) -> "DenseState":
        return cls(state.to_dense())

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    def spectrum(self) -> np.ndarray:
        return np.sort(np.linalg.eigvalsh(self.rho))[::-1]

    def to_low_rank(self, lam0: np.ndarray) -> LowRankState:
        """Leading eigenvectors paired with the conserved spectrum lam0."""
        V, _ = dense_partial_eig(self.rho, lam0.size)
        return LowRankState(V, lam0)


def werner_density(psi: PureState, p: float) -> DenseState:
    N = psi.dim
    return DenseState(p * np.eye(N) / N + (1 - p) * np.outer(psi.amplitudes, psi.amplitudes.conj()))


def _dense(H: SparseHermitian) -> np.ndarray:
    settings.check_dense(H.dim)
    return H.toarray()


def _eig_desc(rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh((rho + rho.conj().T) / 2)
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _rhs_in_basis(V: np.ndarray, lam: np.ndarray, Hd: np.ndarray, model: ModelKind) -> np.ndarray:
    """V X V* with X the derivative in the eigenbasis V of ρ = V diag(lam) V*."""
    G = V.conj().T @ Hd @ V
    L, R = lam[:, None], lam[None, :]
    D = (1j / model.hbar) * (L * G - G * R)
    if model.model is Model.QLLG:
        # (I+S)X − XS = D solved entrywise: x_jl = d_jl / (1 − iκ(λ_j − λ_l))
        X = D / (1 - 1j * model.kappa * (L - R))
    else:
        X = D - (model.kappa / model.hbar) * (L ** 2 * G + G * R ** 2 - 2 * L * G * R)
    return V @ X @ V.conj().T


def dense_rhs(rho: DenseState, H: SparseHermitian, model: ModelKind) -> np.ndarray:
    Hd = _dense(H)
    if model.model is Model.QLL:
        C = rho.rho @ Hd - Hd @ rho.rho
        return (1j / model.hbar) * C - (model.kappa / model.hbar) * (rho.rho @ C - C @ rho.rho)
    lam, V = _eig_desc(rho.rho)
    return _rhs_in_basis(V, lam, Hd, model)


def ei_step(rho: DenseState, H: SparseHermitian, model: ModelKind, tableau: RKTableau,
            h: float, spectrum: Optional[np.ndarray] = None) -> DenseState:
    """One EI-RK step; every stage is projected back onto ``spectrum`` (full length N)."""
    Hd = _dense(H)
    lam, V0 = _eig_desc(rho.rho)
    lam0 = lam if spectrum is None else np.asarray(spectrum, dtype=np.float64)
    base = (V0 * lam0) @ V0.conj().T
    K = [_rhs_in_basis(V0, lam0, Hd, model)]
    for j in range(1, tableau.stages):
        row = tableau.a[j]
        if not any(row):
            K.append(K[0])
            continue
        M = base + h * sum(c * k for c, k in zip(row, K) if c)
        _, Vj = _eig_desc(M)
        K.append(_rhs_in_basis(Vj, lam0, Hd, model))
    M = base + h * sum(c * k for c, k in zip(tableau.b, K) if c)
    _, V = _eig_desc(M)
    return DenseState((V * lam0) @ V.conj().T)


def padded_spectrum(lam: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros(dim)
    out[: lam.size] = lam
    return out


def dense_evolve(initial: LowRankState, H: SparseHermitian, model: ModelKind,
                 tableau: RKTableau, h: float, t_final: float,
                 probe: Optional[Probe] = None, observers: Sequence = ()) -> Trajectory:
    """EI-RK trajectory from a low-rank initial state; records via the same Probe."""
    probe = probe or Probe(H)
    lam0 = initial.lam
    spectrum = padded_spectrum(lam0, initial.dim)
    rho = DenseState.from_low_rank(initial)
    stats = RunStats()
    records: List[ObservableRecord] = []

    def emit(t: float, state: LowRankState) -> None:
        rec = probe(t, state)
        records.append(rec)
        for obs in observers:
            obs(rec)

    state = initial
    emit(0.0, state)
    t_prev = 0.0
    for t in step_grid(h, t_final, uniform=False):
        t0 = time.perf_counter()
        rho = ei_step(rho, H, model, tableau, t - t_prev, spectrum)
        stats.step_seconds.append(time.perf_counter() - t0)
        state = rho.to_low_rank(lam0)
        emit(t, state)
        t_prev = t
    return Trajectory(records, state, stats)


# ─── CLOSED FORM ───────────────────────────────────────────
def _lanczos_basis(Hd: np.ndarray, v: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray, float]:
    n = v.shape[0]
    m = min(m, n)
    Q = np.zeros((n, m), dtype=np.complex128)
    T = np.zeros((m, m))
    beta = np.linalg.norm(v)
    Q[:, 0] = v / beta
    for j in range(m):
        w = Hd @ Q[:, j]
        T[j, j] = np.vdot(Q[:, j], w).real
        for _ in range(2):
            w = w - Q[:, : j + 1] @ (Q[:, : j + 1].conj().T @ w)
        beta = np.linalg.norm(w)
        if j + 1 == m or beta < 1e-14:
            return Q[:, : j + 1], T[: j + 1, : j + 1], beta
        T[j, j + 1] = T[j + 1, j] = beta
        Q[:, j + 1] = w / beta
    return Q, T, beta


def krylov_expv(Hd: np.ndarray, psi: np.ndarray, z: complex, m: int = 30,
                tol: float = 1e-14) -> np.ndarray:
    """exp(z·H)ψ for Hermitian H by Lanczos with substepping."""
    v = np.asarray(psi, dtype=np.complex128)
    remaining, frac = 1.0, 1.0
    while remaining > 0:
        step = min(frac, remaining)
        Q, T, beta = _lanczos_basis(Hd, v, m)
        E = sla.expm(z * step * T)
        nv = np.linalg.norm(v)
        err = beta * abs(E[-1, 0]) * nv
        if err > tol * nv and step > 1e-8:
            frac = step / 2
            continue
        v = nv * (Q @ E[:, 0])
        remaining -= step
        frac = min(1.0, 2 * step)
    return v


def exact_rank1(psi0: PureState, H: SparseHermitian, model: ModelKind, t: float) -> DenseState:
    """|ψ(t)⟩⟨ψ(t)| / ⟨ψ(t)|ψ(t)⟩ with ψ(t) = exp(−(i+κ)Hτ/ħ) ψ0."""
    Hd = _dense(H)
    tau = t / model.time_stretch if model.model is Model.QLLG else t
    z = -(1j + model.kappa) / model.hbar * tau
    if H.dim <= EXPM_DENSE_MAX:
        psi = sla.expm(z * Hd) @ psi0.amplitudes
    else:
        psi = krylov_expv(Hd, psi0.amplitudes, z)
    psi = psi / np.linalg.norm(psi)
    return DenseState(np.outer(psi, psi.conj()))


def dense_partial_eig(M: np.ndarray, r: int) -> Tuple[np.ndarray, np.ndarray]:
    M = np.asarray(M)
    settings.check_dense(M.shape[0])
    w, V = _eig_desc(M)
    return normalize_phase(V[:, :r]), w[:r]

"""dynamics.py – factored right-hand sides of the q-LL and q-LLG equations.

With ρ = Ṽ Λ̃ Ṽ* and the complement V̂, the time derivative in the basis
[Ṽ V̂] has the blocks X11 (r×r) and X12 (r×(N−r)); X22 vanishes. The
derivative is then returned as ρ̇ = Z Ṽ* + Ṽ W* with W = V̂ X12* and
Z = Ṽ X11 + W.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

import settings
from errors import DimensionMismatchError
from lowrank import (
    HouseholderStack,
    apply_complement_left,
    apply_complement_right,
    householder_from_factor,
)
from spinsys import SparseHermitian
from states import LowRankState

logger = logging.getLogger("lrei.dynamics")


class Model(str, Enum):
    QLL = "qll"
    QLLG = "qllg"


@dataclass(frozen=True)
class ModelKind:
    model: Model
    kappa: float = 0.0
    hbar: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError(f"kappa must be finite and non-negative, got {self.kappa}")
        if not np.isfinite(self.hbar) or self.hbar <= 0:
            raise ValueError(f"hbar must be positive, got {self.hbar}")

    def with_kappa(self, kappa: float) -> "ModelKind":
        return replace(self, kappa=kappa)

    def werner(self, p: float) -> "ModelKind":
        """Damping seen by the rank-1 part of p·I/N + (1−p)ρ̂."""
        return self.with_kappa((1.0 - p) * self.kappa)

    @property
    def time_stretch(self) -> float:
        """1+κ²: pure-state q-LL at t equals q-LLG at t·(1+κ²)."""
        return 1.0 + self.kappa ** 2


@dataclass(frozen=True)
class RhsFactors:
    V: np.ndarray
    W: np.ndarray
    X11: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return self.V @ self.X11 + self.W

    def trace(self) -> complex:
        """Tr(ZṼ* + ṼW*) without materialization."""
        cross = np.vdot(self.V, self.W)
        return complex(np.trace(self.X11) + 2 * cross.real)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.X11)))

    def to_dense(self) -> np.ndarray:
        settings.check_dense(self.V.shape[0])
        A = self.Z @ self.V.conj().T
        return A + self.V @ self.W.conj().T


def _projected(V: np.ndarray, H: SparseHermitian) -> Tuple[np.ndarray, np.ndarray]:
    if V.shape[0] != H.dim:
        raise DimensionMismatchError(f"factor has {V.shape[0]} rows, Hamiltonian has dim {H.dim}")
    HV = H.matrix @ V
    G = V.conj().T @ HV
    return HV, (G + G.conj().T) / 2


def _commutator_block(lam: np.ndarray, G: np.ndarray, hbar: float) -> np.ndarray:
    return (1j / hbar) * (lam[:, None] * G - G * lam[None, :])


def x11_qllg(V: np.ndarray, lam: np.ndarray, H: SparseHermitian, kappa: float, hbar: float,
             G: Optional[np.ndarray] = None) -> np.ndarray:
    if G is None:
        _, G = _projected(V, H)
    D = _commutator_block(lam, G, hbar)
    return D / (1 - 1j * kappa * (lam[:, None] - lam[None, :]))


def _lambda_vh(lam: np.ndarray, HV: np.ndarray) -> np.ndarray:
    # Λ̃(Ṽ*H) as an r×N matrix; Ṽ*H = (HṼ)* since H is Hermitian
    return lam[:, None] * HV.conj().T


def x12_qllg(V: np.ndarray, lam: np.ndarray, H: SparseHermitian, kappa: float, hbar: float,
             stack: HouseholderStack, HV: Optional[np.ndarray] = None) -> np.ndarray:
    if HV is None:
        HV, _ = _projected(V, H)
    D12 = (1j / hbar) * apply_complement_right(_lambda_vh(lam, HV), stack)
    return D12 / (1 - 1j * kappa * lam)[:, None]


def x_blocks_qll(V: np.ndarray, lam: np.ndarray, H: SparseHermitian, kappa: float, hbar: float,
                 stack: HouseholderStack, HV: Optional[np.ndarray] = None,
                 G: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    if HV is None or G is None:
        HV, G = _projected(V, H)
    L = lam[:, None]
    R = lam[None, :]
    X11 = (_commutator_block(lam, G, hbar)
           - (kappa / hbar) * (L ** 2 * G + G * R ** 2)
           + (2 * kappa / hbar) * (L * G * R))
    C = apply_complement_right(_lambda_vh(lam, HV), stack)
    X12 = ((1j - kappa * lam) / hbar)[:, None] * C
    return X11, X12


def rhs(state: LowRankState, H: SparseHermitian, model: ModelKind,
        stack: Optional[HouseholderStack] = None) -> RhsFactors:
    V, lam = state.V, state.lam
    if stack is None:
        stack = householder_from_factor(V)
    HV, G = _projected(V, H)
    if model.model is Model.QLLG:
        X11 = x11_qllg(V, lam, H, model.kappa, model.hbar, G=G)
        X12 = x12_qllg(V, lam, H, model.kappa, model.hbar, stack, HV=HV)
    else:
        X11, X12 = x_blocks_qll(V, lam, H, model.kappa, model.hbar, stack, HV=HV, G=G)
    W = apply_complement_left(X12.conj().T, stack)
    return RhsFactors(V, W, X11)

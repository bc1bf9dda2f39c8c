"""integrate.py – spectrum-preserving Runge–Kutta and Adams–Bashforth steppers.

Every intermediate density is kept as a LowRankSum; its leading r-dimensional
eigenspace is extracted with Lanczos and paired with the initial spectrum
Λ̃₀, so the spectrum of every step equals Λ̃₀ by construction.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from dynamics import ModelKind, RhsFactors, rhs
from errors import LanczosConvergenceError, NumericalAbort, StateError, StepGridError
from lowrank import LanczosOptions, LowRankSum, LowRankTerm, lanczos_topk
from observe import ObservableRecord, Probe
from spinsys import SparseHermitian
from states import LowRankState

logger = logging.getLogger("lrei.integrate")

GRID_TOL = 1e-9


# ─── TABLEAUS ──────────────────────────────────────────────
@dataclass(frozen=True)
class RKTableau:
    name: str
    a: Tuple[Tuple[float, ...], ...]
    b: Tuple[float, ...]
    order: int

    def __post_init__(self):
        s = len(self.b)
        if len(self.a) != s or any(len(row) != i for i, row in enumerate(self.a)):
            raise ValueError(f"{self.name}: a must be strictly lower triangular with {s} rows")
        if abs(sum(self.b) - 1.0) > 1e-14:
            raise ValueError(f"{self.name}: weights sum to {sum(self.b)}, expected 1")

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def c(self) -> Tuple[float, ...]:
        return tuple(sum(row) for row in self.a)


TABLEAUS: Dict[str, RKTableau] = {
    "rk1": RKTableau("rk1", ((),), (1.0,), 1),
    "rk2": RKTableau("rk2", ((), (1.0,)), (0.5, 0.5), 2),
    "rk3": RKTableau("rk3", ((), (0.5,), (-1.0, 2.0)), (1 / 6, 2 / 3, 1 / 6), 3),
    "rk4": RKTableau("rk4", ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
                     (1 / 6, 1 / 3, 1 / 3, 1 / 6), 4),
}

AB_WEIGHTS: Dict[int, Tuple[float, ...]] = {
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}

SCHEMES = ("rk1", "rk2", "rk3", "rk4", "ab2", "ab3", "ab4")


def parse_scheme(name: str) -> Tuple[str, int]:
    """'rk4' -> ('rk', 4); raises ValueError listing the valid names."""
    key = str(name).strip().lower()
    if key not in SCHEMES:
        raise ValueError(f"unknown scheme {name!r}; valid schemes: {', '.join(SCHEMES)}")
    return key[:2], int(key[2])


# ─── BOOKKEEPING ───────────────────────────────────────────
@dataclass
class RunStats:
    step_seconds: List[float] = field(default_factory=list)
    peak_blocks: int = 0
    ritz_drift: float = 0.0
    step_drift: float = 0.0
    eig_calls: int = 0
    rhs_calls: int = 0

    def note_blocks(self, count: int) -> None:
        self.peak_blocks = max(self.peak_blocks, count)

    def note_drift(self, drift: float) -> None:
        self.ritz_drift = max(self.ritz_drift, drift)
        self.step_drift = max(self.step_drift, drift)

    @property
    def mean_step(self) -> float:
        return float(np.mean(self.step_seconds)) if self.step_seconds else 0.0

    @property
    def max_step(self) -> float:
        return max(self.step_seconds, default=0.0)


def _rhs(state: LowRankState, H: SparseHermitian, model: ModelKind,
         stats: Optional[RunStats]) -> RhsFactors:
    if stats is not None:
        stats.rhs_calls += 1
    return rhs(state, H, model)


def stage_sum(V0: np.ndarray, lam0: np.ndarray, stages: Sequence[RhsFactors],
              coeffs: Sequence[float], h: float) -> LowRankSum:
    """V0Λ0V0* + h Σ c_i (Z_i V_i* + V_i W_i*) in Hermitian-pairs layout.

    Z_i = V_i X11_i + W_i, so each stage contributes (V_i, V_i, h c_i X11_i/2)
    and (W_i, V_i, h c_i); only V_i and W_i are referenced.
    """
    terms = [LowRankTerm(V0, V0, np.diag(lam0 / 2))]
    for f, c in zip(stages, coeffs):
        if c == 0:
            continue
        terms.append(LowRankTerm(f.V, f.V, (h * c / 2) * f.X11))
        terms.append(LowRankTerm(f.W, f.V, h * c))
    return LowRankSum(V0.shape[0], tuple(terms), hermitian_pairs=True)


def _extract(lrs: LowRankSum, lam0: np.ndarray, v0: np.ndarray, opts: LanczosOptions,
             stats: Optional[RunStats], stage: Optional[int]) -> LowRankState:
    try:
        pairs = lanczos_topk(lrs.matvec, lrs.dim, lam0.size, replace(opts, v0=v0))
    except LanczosConvergenceError as exc:
        raise LanczosConvergenceError("stage eigensolve failed", exc.residuals, stage) from exc
    if stats is not None:
        stats.eig_calls += 1
        # the new factor is one more live block next to those held by the sum
        stats.note_blocks(lrs.block_count() + 1)
        stats.note_drift(float(np.max(np.abs(pairs.values - lam0))))
    return LowRankState(pairs.vectors, lam0)


# ─── RUNGE-KUTTA ───────────────────────────────────────────
def rk_step(state: LowRankState, H: SparseHermitian, model: ModelKind, tableau: RKTableau,
            h: float, opts: Optional[LanczosOptions] = None, stats: Optional[RunStats] = None,
            start_rhs: Optional[RhsFactors] = None) -> LowRankState:
    if not h > 0:
        raise StepGridError(f"step size must be positive, got {h}")
    opts = opts or LanczosOptions()
    V0, lam0 = state.V, state.lam
    K = [start_rhs if start_rhs is not None else _rhs(state, H, model, stats)]
    prev = V0
    for j in range(1, tableau.stages):
        row = tableau.a[j]
        if not any(row):
            stage_state = state
        else:
            lrs = stage_sum(V0, lam0, K, row, h)
            stage_state = _extract(lrs, lam0, prev[:, 0], opts, stats, stage=j + 1)
            prev = stage_state.V
        K.append(_rhs(stage_state, H, model, stats))
    lrs = stage_sum(V0, lam0, K, tableau.b, h)
    return _extract(lrs, lam0, prev[:, 0], opts, stats, stage=None)


# ─── ADAMS-BASHFORTH ───────────────────────────────────────
@dataclass(frozen=True)
class ABHistory:
    """Latest state plus the last ``order`` right-hand sides, newest first."""
    order: int
    state: LowRankState
    entries: Tuple[RhsFactors, ...]

    @property
    def weights(self) -> Tuple[float, ...]:
        return AB_WEIGHTS[self.order]

    @property
    def full(self) -> bool:
        return len(self.entries) == self.order

    def push(self, state: LowRankState, f: RhsFactors) -> "ABHistory":
        return ABHistory(self.order, state, ((f,) + self.entries)[: self.order])


StepCallback = Callable[[int, LowRankState], None]


def ab_bootstrap(state: LowRankState, H: SparseHermitian, model: ModelKind, m: int, h: float,
                 opts: Optional[LanczosOptions] = None, stats: Optional[RunStats] = None,
                 on_step: Optional[StepCallback] = None, steps: Optional[int] = None) -> ABHistory:
    """m−1 steps of the order-(m−1) RK method; ``steps`` caps them on very short runs."""
    if m not in AB_WEIGHTS:
        raise ValueError(f"Adams-Bashforth order must be one of {sorted(AB_WEIGHTS)}, got {m}")
    tableau = TABLEAUS[f"rk{m - 1}"]
    f = _rhs(state, H, model, stats)
    history = ABHistory(m, state, (f,))
    for k in range(1, (m - 1 if steps is None else min(m - 1, steps)) + 1):
        t0 = time.perf_counter()
        state = rk_step(history.state, H, model, tableau, h, opts, stats, start_rhs=f)
        f = _rhs(state, H, model, stats)
        history = history.push(state, f)
        if stats is not None:
            stats.step_seconds.append(time.perf_counter() - t0)
        if on_step is not None:
            on_step(k, state)
    return history


def ab_step(history: ABHistory, H: SparseHermitian, model: ModelKind, h: float,
            opts: Optional[LanczosOptions] = None,
            stats: Optional[RunStats] = None) -> Tuple[LowRankState, ABHistory]:
    if not history.full:
        raise ValueError(f"AB{history.order} history holds {len(history.entries)} entries")
    opts = opts or LanczosOptions()
    current = history.state
    lrs = stage_sum(current.V, current.lam, history.entries, history.weights, h)
    state = _extract(lrs, current.lam, current.V[:, 0], opts, stats, stage=None)
    f = _rhs(state, H, model, stats)
    return state, history.push(state, f)


# ─── DRIVER ────────────────────────────────────────────────
class Trajectory(NamedTuple):
    records: List[ObservableRecord]
    final: LowRankState
    stats: RunStats


Observer = Callable[[ObservableRecord], None]


def step_grid(h: float, t_final: float, uniform: bool) -> List[float]:
    """Times t_1..t_K of the step grid; the last RK step is shortened to hit t_final."""
    if not (h > 0 and t_final > 0):
        raise StepGridError(f"need h > 0 and t_final > 0, got h={h}, t_final={t_final}")
    if h > t_final * (1 + GRID_TOL):
        raise StepGridError(f"step size {h} exceeds t_final {t_final}")
    ratio = t_final / h
    count = round(ratio)
    if abs(ratio - count) <= GRID_TOL * max(1.0, ratio):
        return [t_final * k / count for k in range(1, count + 1)]
    if uniform:
        lo, hi = math.floor(ratio), math.ceil(ratio)
        raise StepGridError(
            f"multistep schemes need t_final/h to be an integer, got {ratio:.6g}; "
            f"use h = {t_final / hi:.6g} or {t_final / max(lo, 1):.6g}, or adjust T_FINAL")
    times = [k * h for k in range(1, math.floor(ratio) + 1)]
    times.append(t_final)
    return times


def _check_finite(state: LowRankState, step: int) -> None:
    if not np.all(np.isfinite(state.V)):
        raise NumericalAbort("non-finite entries in the eigenvector factor", step)


def evolve(initial: LowRankState, H: SparseHermitian, model: ModelKind, scheme: str,
           h: float, t_final: float, observers: Sequence[Observer] = (),
           probe: Optional[Probe] = None, opts: Optional[LanczosOptions] = None,
           stats: Optional[RunStats] = None) -> Trajectory:
    kind, order = parse_scheme(scheme)
    times = step_grid(h, t_final, uniform=(kind == "ab"))
    if initial.rank >= initial.dim:
        raise StateError(f"rank {initial.rank} equals the dimension {initial.dim}; nothing to complement")
    probe = probe or Probe(H)
    opts = opts or LanczosOptions()
    stats = stats if stats is not None else RunStats()
    records: List[ObservableRecord] = []

    def emit(t: float, state: LowRankState, drift: float = 0.0) -> None:
        rec = probe(t, state, drift)
        records.append(rec)
        for obs in observers:
            obs(rec)

    emit(0.0, initial)
    state = initial
    step = 1
    logger.debug("evolve: scheme=%s h=%g steps=%d rank=%d N=%d",
                 scheme, h, len(times), initial.rank, initial.dim)
    try:
        if kind == "rk":
            tableau = TABLEAUS[scheme]
            t_prev = 0.0
            for step, t in enumerate(times, start=1):
                t0 = time.perf_counter()
                stats.step_drift = 0.0
                state = rk_step(state, H, model, tableau, t - t_prev, opts, stats)
                stats.step_seconds.append(time.perf_counter() - t0)
                _check_finite(state, step)
                emit(t, state, stats.step_drift)
                t_prev = t
        else:
            h_grid = times[0]
            boot = min(order - 1, len(times))

            def on_boot(k: int, s: LowRankState) -> None:
                nonlocal step
                _check_finite(s, k)
                emit(times[k - 1], s, stats.step_drift)
                stats.step_drift = 0.0
                step = k + 1

            stats.step_drift = 0.0
            history = ab_bootstrap(state, H, model, order, h_grid, opts, stats, on_boot, boot)
            state = history.state
            for step, t in enumerate(times[boot:], start=boot + 1):
                t0 = time.perf_counter()
                stats.step_drift = 0.0
                state, history = ab_step(history, H, model, h_grid, opts, stats)
                stats.step_seconds.append(time.perf_counter() - t0)
                _check_finite(state, step)
                emit(t, state, stats.step_drift)
    except np.linalg.LinAlgError as exc:
        raise NumericalAbort(f"linear algebra failure: {exc}", step) from exc
    except LanczosConvergenceError as exc:
        exc.step = step
        exc.args = (f"step {step}: {exc}",)
        raise
    logger.debug("evolve done: eig_calls=%d peak_blocks=%d max_drift=%.2e",
                 stats.eig_calls, stats.peak_blocks, stats.ritz_drift)
    return Trajectory(records, state, stats)

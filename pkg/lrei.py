#!/usr/bin/env python3
"""lrei.py – batch front-end for the low-rank q-LL / q-LLG solver.
Reads an experiment file (dotenv grammar, see experiment.env.example), lets
command-line flags override any key, and writes a CSV of observables plus a
JSON run manifest next to it.

    python lrei.py run experiment.env
    python lrei.py converge experiment.env --schemes rk1,rk2,rk3,rk4 --h-values 0.05,0.025,0.0125,0.00625
    python lrei.py bench experiment.env --n-values 12,13,14 --r-values 3 --schemes rk4,ab4
    python lrei.py validate experiment.env
    python lrei.py compare experiment.env
"""
import os
import re
import sys
import csv
import json
import math
import time
import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

import settings
from settings import logger, setup_logging
from dynamics import Model, ModelKind
from errors import ConfigError, LreiError, NumericalAbort, ResourceGuardError, StateError
from integrate import (
    TABLEAUS,
    RunStats,
    Trajectory,
    ab_bootstrap,
    ab_step,
    evolve,
    parse_scheme,
    rk_step,
    step_grid,
)
from lowrank import LanczosOptions, default_krylov_dim, normalize_phase
from observe import Probe, Selector, parse_selector, split_selectors
from oracle import DenseState, dense_evolve, ei_step, exact_rank1, padded_spectrum
from spinsys import HamiltonianParams, SparseHermitian, SpinLattice, build_hamiltonian, chain, triangular
from states import InitialState, LowRankState, PureState, StateSpec, parse_state_spec

__version__ = "0.1.0"

# ─── CONFIG ────────────────────────────────────────────────
# experiment-file key -> ExperimentConfig attribute
KEYS = {
    "MODEL": "model",
    "N_SITES": "n_sites",
    "LATTICE": "lattice",
    "LATTICE_ROWS": "lattice_rows",
    "LATTICE_COLS": "lattice_cols",
    "PERIODIC": "periodic",
    "EDGES": "edges",
    "J": "J",
    "DMI": "dmi",
    "B_FIELD": "b_field",
    "KAPPA": "kappa",
    "UNITS": "units",
    "INITIAL_STATE": "initial_state",
    "SCHEME": "scheme",
    "H": "h",
    "T_FINAL": "t_final",
    "OBSERVABLES": "observables",
    "OUTPUT": "output",
    "SEED": "seed",
    "ENGINE": "engine",
    "LANCZOS_TOL": "lanczos_tol",
}

DEFAULT_OBSERVABLES = "energy mx my mz trace purity"
DENSE_ENGINE_MAX_SITES = 10
MEMORY_WARN_BYTES = 2 ** 30

_KEY_LINE = re.compile(r"^\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*=")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _vec3(text: str) -> Tuple[float, float, float]:
    parts = [p for p in re.split(r"[,\s]+", text.strip().strip("()[]")) if p]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _edges(text: str) -> Tuple[Tuple[int, int], ...]:
    out = []
    for token in re.split(r"[,;\s]+", text.strip()):
        if not token:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", token)
        if not m:
            raise ValueError(f"edge {token!r} is not of the form i-j")
        out.append((int(m.group(1)), int(m.group(2))))
    if not out:
        raise ValueError("edge list is empty")
    return tuple(out)


def read_experiment_file(path: str) -> Tuple[Dict[str, Optional[str]], Dict[str, int]]:
    """Values via python-dotenv plus the 1-based line each key was (last) set on."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"experiment file {path} not found")
    values = dotenv_values(p)
    lines: Dict[str, int] = {}
    for no, line in enumerate(p.read_text().splitlines(), start=1):
        m = _KEY_LINE.match(line)
        if m:
            lines[m.group(1).upper()] = no
    return {k.upper(): v for k, v in values.items()}, lines


@dataclass
class ExperimentConfig:
    model: str = "qllg"
    n_sites: int = 0
    lattice: str = "chain"
    lattice_rows: Optional[int] = None
    lattice_cols: Optional[int] = None
    periodic: bool = False
    edges: Tuple[Tuple[int, int], ...] = ()
    J: float = 1.0
    dmi: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    b_field: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kappa: float = 0.0
    units: str = "meV_ps"
    initial_state: str = "af2"
    scheme: str = "rk4"
    h: float = 0.0
    t_final: float = 0.0
    observables: Tuple[str, ...] = tuple(DEFAULT_OBSERVABLES.split())
    output: str = "lrei_run.csv"
    seed: int = settings.LANCZOS_SEED
    engine: str = "lrei"
    lanczos_tol: float = 1e-10
    lines: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    # ── loading ──
    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[Dict[str, str]] = None) -> "ExperimentConfig":
        values, lines = read_experiment_file(path) if path else ({}, {})
        for key, value in (overrides or {}).items():
            values[key.upper()] = value
            lines.pop(key.upper(), None)
        cfg = cls.from_mapping(values, lines)
        cfg.validate()
        return cfg

    @classmethod
    def from_mapping(cls, values: Dict[str, Optional[str]], lines: Dict[str, int]) -> "ExperimentConfig":
        cfg = cls(lines=dict(lines))
        parsers: Dict[str, Callable[[str], object]] = {
            "MODEL": lambda s: s.strip().lower(),
            "N_SITES": int,
            "LATTICE": lambda s: s.strip().lower(),
            "LATTICE_ROWS": int,
            "LATTICE_COLS": int,
            "PERIODIC": _bool,
            "EDGES": _edges,
            "J": float,
            "DMI": _vec3,
            "B_FIELD": _vec3,
            "KAPPA": float,
            "UNITS": lambda s: s.strip(),
            "INITIAL_STATE": lambda s: s.strip(),
            "SCHEME": lambda s: s.strip().lower(),
            "H": float,
            "T_FINAL": float,
            "OBSERVABLES": lambda s: tuple(split_selectors(s)),
            "OUTPUT": lambda s: s.strip(),
            "SEED": int,
            "ENGINE": lambda s: s.strip().lower(),
            "LANCZOS_TOL": float,
        }
        for key, raw in values.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key (valid keys: {', '.join(KEYS)})", key, lines.get(key))
            if raw is None or not str(raw).strip():
                raise ConfigError("missing value", key, lines.get(key))
            try:
                setattr(cfg, KEYS[key], parsers[key](str(raw)))
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), key, lines.get(key)) from None
        return cfg

    def fail(self, key: str, message: str) -> ConfigError:
        return ConfigError(message, key, self.lines.get(key))

    # ── validation (no allocation) ──
    def validate(self) -> None:
        if self.model not in (m.value for m in Model):
            raise self.fail("MODEL", f"model must be 'qll' or 'qllg', got {self.model!r}")
        if self.units not in ("meV_ps", "natural"):
            raise self.fail("UNITS", f"units must be 'meV_ps' or 'natural', got {self.units!r}")
        if self.engine not in ("lrei", "dense"):
            raise self.fail("ENGINE", f"engine must be 'lrei' or 'dense', got {self.engine!r}")

        for key, values in (("J", [self.J]), ("DMI", self.dmi), ("B_FIELD", self.b_field),
                            ("KAPPA", [self.kappa]), ("H", [self.h]), ("T_FINAL", [self.t_final]),
                            ("LANCZOS_TOL", [self.lanczos_tol])):
            if not all(math.isfinite(v) for v in values):
                raise self.fail(key, "value must be finite")
        if self.kappa < 0:
            raise self.fail("KAPPA", f"damping must be non-negative, got {self.kappa}")
        if not 0 < self.lanczos_tol < 1:
            raise self.fail("LANCZOS_TOL", f"tolerance must lie in (0, 1), got {self.lanczos_tol}")

        self._validate_lattice()
        settings.check_sites(self.n_sites)

        try:
            kind, _ = parse_scheme(self.scheme)
        except ValueError as exc:
            raise self.fail("SCHEME", str(exc)) from None
        if self.h <= 0:
            raise self.fail("H", f"step size must be positive, got {self.h}")
        if self.t_final <= 0:
            raise self.fail("T_FINAL", f"final time must be positive, got {self.t_final}")
        step_grid(self.h, self.t_final, uniform=(kind == "ab"))

        if self.engine == "dense":
            if kind != "rk":
                raise self.fail("ENGINE", "the dense engine runs Runge-Kutta schemes only")
            if self.n_sites > DENSE_ENGINE_MAX_SITES:
                raise ResourceGuardError(
                    f"dense engine limited to {DENSE_ENGINE_MAX_SITES} sites, got {self.n_sites}")

        if not self.observables:
            raise self.fail("OBSERVABLES", "no observables selected")
        for text in self.observables:
            try:
                parse_selector(text, self.n_sites)
            except ValueError as exc:
                raise self.fail("OBSERVABLES", str(exc)) from None

        try:
            self.state_spec().check(self.n_sites)
        except StateError as exc:
            raise self.fail("INITIAL_STATE", str(exc)) from None

    def _validate_lattice(self) -> None:
        if self.lattice == "triangular":
            if not self.lattice_rows or not self.lattice_cols or min(self.lattice_rows, self.lattice_cols) < 1:
                raise self.fail("LATTICE_ROWS", "triangular lattice needs LATTICE_ROWS and LATTICE_COLS ≥ 1")
            n = self.lattice_rows * self.lattice_cols
            if self.n_sites and self.n_sites != n:
                raise self.fail("N_SITES", f"triangular {self.lattice_rows}×{self.lattice_cols} "
                                           f"lattice has {n} sites, N_SITES says {self.n_sites}")
            self.n_sites = n
        elif self.lattice not in ("chain", "custom"):
            raise self.fail("LATTICE", f"lattice must be chain, triangular or custom, got {self.lattice!r}")
        if self.n_sites < 1:
            raise self.fail("N_SITES", "number of sites must be a positive integer")
        if self.lattice == "custom":
            if not self.edges:
                raise self.fail("EDGES", "custom lattice needs an EDGES list")
            for i, j in self.edges:
                if not (1 <= i <= self.n_sites and 1 <= j <= self.n_sites) or i == j:
                    raise self.fail("EDGES", f"edge {i}-{j} invalid for {self.n_sites} sites")

    # ── assembly ──
    @property
    def hbar(self) -> float:
        return settings.hbar_for(self.units)

    def state_spec(self) -> StateSpec:
        return parse_state_spec(self.initial_state)

    def selectors(self) -> List[Selector]:
        return [parse_selector(s, self.n_sites) for s in self.observables]

    def spin_lattice(self, n_sites: Optional[int] = None) -> SpinLattice:
        """Configured lattice, or the same preset resized to ``n_sites`` (benchmarks).

        A resized triangular patch takes the most square rows×cols factorization
        of n; custom edge lists cannot be resized.
        """
        n = self.n_sites if n_sites is None else n_sites
        if n == self.n_sites:
            if self.lattice == "triangular":
                return triangular(self.lattice_rows, self.lattice_cols, self.periodic)
            if self.lattice == "custom":
                return SpinLattice.custom(n, self.edges)
            return chain(n, self.periodic)
        if self.lattice == "custom":
            raise self.fail("EDGES", f"custom edge list covers {self.n_sites} sites and cannot be resized to {n}")
        if self.lattice == "triangular":
            rows = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
            cols = n // rows
            # wrapping a strip narrower than 3 would duplicate bonds
            periodic = self.periodic and rows >= 3
            logger.info("triangular lattice resized to %d×%d (periodic=%s) for n=%d", rows, cols, periodic, n)
            return triangular(rows, cols, periodic)
        return chain(n, self.periodic)

    def hamiltonian(self, n_sites: Optional[int] = None,
                    lattice: Optional[SpinLattice] = None) -> SparseHermitian:
        lattice = lattice or self.spin_lattice(n_sites)
        params = HamiltonianParams.uniform(lattice, self.J, self.dmi, self.b_field, self.hbar)
        return build_hamiltonian(lattice, params)

    def model_kind(self) -> ModelKind:
        return ModelKind(Model(self.model), self.kappa, self.hbar)

    def lanczos_options(self) -> LanczosOptions:
        return LanczosOptions(tol=self.lanczos_tol, seed=self.seed)

    def echo(self) -> Dict[str, object]:
        return {key: getattr(self, attr) for key, attr in KEYS.items()}


class Experiment(NamedTuple):
    config: ExperimentConfig
    H: SparseHermitian
    model: ModelKind          # damping already adjusted for Werner runs
    initial: InitialState
    probe: Probe
    opts: LanczosOptions


def assemble(cfg: ExperimentConfig) -> Experiment:
    H = cfg.hamiltonian()
    initial = cfg.state_spec().build(cfg.n_sites)
    if initial.state.rank >= H.dim:
        raise ConfigError(f"initial state has full rank {initial.state.rank} = 2^{cfg.n_sites}; "
                          f"the low-rank solver needs rank below {H.dim}",
                          "INITIAL_STATE", cfg.lines.get("INITIAL_STATE"))
    model = cfg.model_kind()
    if initial.werner_p is not None:
        model = model.werner(initial.werner_p)
    # magnetization is reported in units of ħ
    probe = Probe(H, cfg.selectors(), werner_p=initial.werner_p, hbar=1.0)
    return Experiment(cfg, H, model, initial, probe, cfg.lanczos_options())


# ─── OUTPUT ────────────────────────────────────────────────
def fmt(value: float) -> str:
    return format(float(value), ".17g")


class CsvRecorder:
    """Observer writing one CSV row per record, flushed row by row."""

    def __init__(self, path: str, probe: Probe):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.selectors = probe.selectors
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(["t"] + probe.columns)
        self._fh.flush()
        self.rows = 0

    def __call__(self, record) -> None:
        self._writer.writerow([fmt(record.t)] + [fmt(v) for v in record.row(self.selectors)])
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CsvRecorder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_table(path: str, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def manifest_path(output: str) -> Path:
    return Path(f"{output}.manifest.json")


def save_manifest(path: Path, manifest: Dict[str, object]):
    target = Path(path)
    payload = json.dumps(manifest, indent=2, default=str)
    tmp = target.with_suffix(f"{target.suffix}.tmp")
    tmp.write_text(payload)
    tmp.replace(target)


# ─── RUN ───────────────────────────────────────────────────
def _run_engine(exp: Experiment, observers: Sequence[Callable] = (),
                stats: Optional[RunStats] = None, model: Optional[ModelKind] = None,
                h: Optional[float] = None, t_final: Optional[float] = None,
                scheme: Optional[str] = None) -> Trajectory:
    cfg = exp.config
    model = model or exp.model
    h = h or cfg.h
    t_final = t_final or cfg.t_final
    scheme = scheme or cfg.scheme
    if cfg.engine == "dense":
        return dense_evolve(exp.initial.state, exp.H, model, TABLEAUS[scheme], h, t_final,
                            exp.probe, observers)
    return evolve(exp.initial.state, exp.H, model, scheme, h, t_final,
                  observers, exp.probe, exp.opts, stats)


def run(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    exp = assemble(cfg)
    logger.info("🚀 run: model=%s n=%d rank=%d scheme=%s h=%g t_final=%g engine=%s",
                cfg.model, cfg.n_sites, exp.initial.state.rank, cfg.scheme, cfg.h, cfg.t_final, cfg.engine)
    stats = RunStats()
    manifest: Dict[str, object] = {
        "version": __version__,
        "config": cfg.echo(),
        "rank": exp.initial.state.rank,
        "dim": exp.H.dim,
        "effective_kappa": exp.model.kappa,
        "status": "ok",
        "error": None,
    }
    recorder = CsvRecorder(cfg.output, exp.probe)
    try:
        traj = _run_engine(exp, [recorder], stats)
        stats = traj.stats
    except NumericalAbort as exc:
        manifest.update(status="aborted", error=str(exc), failed_step=exc.step)
        raise
    except BaseException as exc:
        manifest.update(status="failed", error=str(exc) or type(exc).__name__)
        raise
    finally:
        recorder.close()
        manifest.update(
            steps=len(stats.step_seconds),
            rows=recorder.rows,
            wall_time_per_step={"mean": stats.mean_step, "max": stats.max_step},
            peak_live_blocks=stats.peak_blocks,
            max_ritz_drift=stats.ritz_drift,
            eig_calls=stats.eig_calls,
            rhs_calls=stats.rhs_calls,
            elapsed_seconds=time.perf_counter() - started,
        )
        save_manifest(manifest_path(cfg.output), manifest)
        level = logger.info if manifest["status"] == "ok" else logger.warning
        level("💾 %s rows -> %s, manifest -> %s", recorder.rows, cfg.output, manifest_path(cfg.output))
    return 0


# ─── CONVERGENCE ───────────────────────────────────────────
class ConvergenceRow(NamedTuple):
    scheme: str
    h: float
    error: float
    fitted_order: float


def fitted_order(h_values: Sequence[float], errors: Sequence[float], last: int = 3) -> float:
    """Least-squares log-log slope over the ``last`` smallest step sizes."""
    pairs = sorted(zip(h_values, errors), reverse=True)[-last:]
    pairs = [(h, e) for h, e in pairs if e > 0 and math.isfinite(e)]
    if len(pairs) < 2:
        return float("nan")
    x = np.log([h for h, _ in pairs])
    y = np.log([e for _, e in pairs])
    return float(np.polyfit(x, y, 1)[0])


def _reference(exp: Experiment, h_values: Sequence[float]) -> Tuple[str, Callable[[Trajectory], float]]:
    cfg = exp.config
    state = exp.initial.state
    dense_ok = exp.H.dim <= settings.DENSE_MAX_DIM

    if state.rank == 1 and dense_ok:
        ref = exact_rank1(PureState(state.V[:, 0]), exp.H, exp.model, cfg.t_final).rho
        logger.info("reference: closed-form rank-1 solution")
        return "rho_max", lambda traj: float(np.abs(traj.final.to_dense() - ref).max())

    if dense_ok and cfg.n_sites <= 8:
        h_ref = min(h_values) / 8
        traj = dense_evolve(state, exp.H, exp.model, TABLEAUS["rk4"], h_ref, cfg.t_final)
        ref = traj.final.to_dense()
        logger.info("reference: dense EI-RK4 at h=%g", h_ref)
        return "rho_max", lambda t: float(np.abs(t.final.to_dense() - ref).max())

    if state.rank != 1:
        raise ConfigError("convergence study of a mixed state needs the dense reference (n ≤ 8)",
                          "INITIAL_STATE", cfg.lines.get("INITIAL_STATE"))
    h_ref = min(h_values) / 8
    ref_traj = evolve(state, exp.H, exp.model, "rk4", h_ref, cfg.t_final, (), exp.probe, exp.opts)
    ref_row = np.array(ref_traj.records[-1].row(exp.probe.selectors))
    logger.info("reference: LREI-RK4 at h=%g, observable sup-norm", h_ref)
    return "observable_sup", lambda t: float(np.abs(np.array(t.records[-1].row(exp.probe.selectors)) - ref_row).max())


def convergence_study(cfg: ExperimentConfig, schemes: Sequence[str],
                      h_values: Sequence[float]) -> List[ConvergenceRow]:
    for s in schemes:
        kind, _ = parse_scheme(s)
        for h in h_values:
            step_grid(h, cfg.t_final, uniform=(kind == "ab"))
    exp = assemble(cfg)
    metric, error_of = _reference(exp, h_values)
    logger.info("🚀 convergence study: %d schemes × %d step sizes, metric=%s",
                len(schemes), len(h_values), metric)

    def cell(args: Tuple[str, float]) -> Tuple[str, float, float]:
        scheme, h = args
        traj = evolve(exp.initial.state, exp.H, exp.model, scheme, h, cfg.t_final,
                      (), exp.probe, exp.opts)
        err = error_of(traj)
        logger.debug("converge %s h=%g error=%.3e", scheme, h, err)
        return scheme, h, err

    cells = [(s, h) for s in schemes for h in h_values]
    with ThreadPoolExecutor(max_workers=max(1, settings.WORKERS)) as pool:
        results = list(pool.map(cell, cells))

    rows: List[ConvergenceRow] = []
    for s in schemes:
        mine = [(h, e) for sc, h, e in results if sc == s]
        order = fitted_order([h for h, _ in mine], [e for _, e in mine])
        rows.extend(ConvergenceRow(s, h, e, order) for h, e in mine)
        logger.info("%s: fitted order %.2f", s, order)
    return rows


# ─── BENCHMARK ─────────────────────────────────────────────
class BenchRow(NamedTuple):
    n: int
    r: int
    scheme: str
    seconds_per_step: float
    dense_seconds_per_step: Optional[float] = None
    lattice: str = "chain"
    edges: int = 0


def benchmark_state(n: int, r: int, seed: int) -> LowRankState:
    """Random rank-r state with spectrum ∝ (r, r−1, …, 1)."""
    settings.check_sites(n)
    N = 2 ** n
    if r >= N:
        raise StateError(f"rank {r} too large for {n} sites")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((N, r)) + 1j * rng.standard_normal((N, r)))
    lam = np.arange(r, 0, -1, dtype=float)
    return LowRankState(normalize_phase(Q), lam / lam.sum())


def _time_steps(step: Callable[[], None], steps: int) -> float:
    step()  # warm-up
    t0 = time.perf_counter()
    for _ in range(steps):
        step()
    return (time.perf_counter() - t0) / steps


def benchmark(cfg: ExperimentConfig, n_values: Sequence[int], r_values: Sequence[int],
              schemes: Sequence[str], steps: int = 5, dense: bool = False) -> List[BenchRow]:
    steps = max(steps, 5)
    model = cfg.model_kind()
    opts = cfg.lanczos_options()
    for s in schemes:
        parse_scheme(s)
    if cfg.lattice == "custom":
        for n in n_values:
            cfg.spin_lattice(n)

    def cell(args: Tuple[int, int, str]) -> BenchRow:
        n, r, scheme = args
        lattice = cfg.spin_lattice(n)
        try:
            H = cfg.hamiltonian(lattice=lattice)
            state = benchmark_state(n, r, cfg.seed)
            kind, order = parse_scheme(scheme)
            if kind == "rk":
                box = [state]

                def one() -> None:
                    box[0] = rk_step(box[0], H, model, TABLEAUS[scheme], cfg.h, opts)
            else:
                hist = [ab_bootstrap(state, H, model, order, cfg.h, opts)]

                def one() -> None:
                    _, hist[0] = ab_step(hist[0], H, model, cfg.h, opts)
            seconds = _time_steps(one, steps)

            dense_seconds = None
            if dense and n <= DENSE_ENGINE_MAX_SITES:
                spectrum = padded_spectrum(state.lam, state.dim)
                rho = [DenseState.from_low_rank(state)]
                tableau = TABLEAUS[f"rk{order}"]

                def one_dense() -> None:
                    rho[0] = ei_step(rho[0], H, model, tableau, cfg.h, spectrum)
                dense_seconds = _time_steps(one_dense, steps)
            logger.info("bench n=%d r=%d %s: %.4g s/step", n, r, scheme, seconds)
            return BenchRow(n, r, scheme, seconds, dense_seconds, lattice.preset, len(lattice.edges))
        except LreiError as exc:
            logger.warning("⚠️ bench cell n=%d r=%d %s skipped: %s", n, r, scheme, exc)
            return BenchRow(n, r, scheme, float("nan"), None, lattice.preset, len(lattice.edges))

    cells = [(n, r, s) for n in n_values for r in r_values for s in schemes]
    logger.info("🚀 benchmark: %d cells, %d timed steps each", len(cells), steps)
    with ThreadPoolExecutor(max_workers=max(1, settings.WORKERS)) as pool:
        rows = list(pool.map(cell, cells))
    _check_soft_criteria(rows)
    return rows


def _check_soft_criteria(rows: Sequence[BenchRow]) -> None:
    by_key = {(row.n, row.r, row.scheme): row.seconds_per_step for row in rows}
    for (n, r, scheme), sec in by_key.items():
        if scheme != "rk4" or n < 12:
            continue
        ab = by_key.get((n, r, "ab4"))
        if ab and math.isfinite(ab) and math.isfinite(sec):
            ratio = sec / ab
            if not 1.5 <= ratio <= 4:
                logger.warning("⚠️ RK4/AB4 step-time ratio %.2f at n=%d r=%d outside [1.5, 4]", ratio, n, r)
            else:
                logger.info("RK4/AB4 step-time ratio %.2f at n=%d r=%d", ratio, n, r)


# ─── VALIDATE ──────────────────────────────────────────────
class Diagnostics(NamedTuple):
    memory_bytes: int
    warnings: List[str]


def estimate_memory(n_sites: int, rank: int, scheme: str, n_edges: int) -> int:
    """Bytes for the live factor blocks, the Krylov basis and the sparse Hamiltonian."""
    N = 2 ** n_sites
    kind, order = parse_scheme(scheme)
    blocks = 2 * order + 1
    krylov = default_krylov_dim(N, rank) if rank < N else N
    factors = 16 * N * (rank * blocks + 2 * krylov)
    hamiltonian = 20 * N * (1 + 2 * n_edges)
    return int(factors + hamiltonian)


def validate(cfg: ExperimentConfig) -> Diagnostics:
    warnings: List[str] = []
    spec = cfg.state_spec()
    if cfg.lattice == "triangular":
        n_edges = 3 * cfg.n_sites
    elif cfg.lattice == "custom":
        n_edges = len(cfg.edges)
    else:
        n_edges = cfg.n_sites
    memory = estimate_memory(cfg.n_sites, spec.max_rank, cfg.scheme, n_edges)
    if memory > MEMORY_WARN_BYTES:
        warnings.append(f"estimated memory {memory / 2 ** 30:.1f} GiB for n={cfg.n_sites}")
    steps = len(step_grid(cfg.h, cfg.t_final, uniform=cfg.scheme.startswith("ab")))
    if steps > 100_000:
        warnings.append(f"{steps} steps requested")
    if cfg.engine == "dense" and cfg.n_sites > 8:
        warnings.append("dense engine at n > 8 is slow (O(N³) per stage)")
    if spec.kind == "werner":
        warnings.append(f"Werner run: low-rank part evolves with damping {(1 - spec.p) * cfg.kappa:g}")
    if cfg.kappa == 0:
        warnings.append("KAPPA = 0: undamped (von Neumann) dynamics")
    return Diagnostics(memory, warnings)


# ─── COMPARE ───────────────────────────────────────────────
def compare_models(cfg: ExperimentConfig, output: Optional[str] = None) -> Dict[str, float]:
    """q-LL at t against q-LLG at t·(1+κ²); returns the sup-norm deviation per observable."""
    exp = assemble(cfg)
    kappa = exp.model.kappa
    stretch = 1 + kappa ** 2
    qll = ModelKind(Model.QLL, kappa, exp.model.hbar)
    qllg = ModelKind(Model.QLLG, kappa, exp.model.hbar)
    logger.info("🚀 compare: kappa=%g stretch=%g rank=%d", kappa, stretch, exp.initial.state.rank)

    ll = _run_engine(exp, model=qll)
    llg = _run_engine(exp, model=qllg, h=cfg.h * stretch, t_final=cfg.t_final * stretch)
    count = min(len(ll.records), len(llg.records))
    if len(ll.records) != len(llg.records):
        logger.warning("⚠️ trajectories have %d and %d records; comparing the first %d",
                       len(ll.records), len(llg.records), count)

    selectors = exp.probe.selectors
    a = np.array([r.row(selectors) for r in ll.records[:count]], dtype=float)
    b = np.array([r.row(selectors) for r in llg.records[:count]], dtype=float)
    deviations = {s.column: float(np.abs(a[:, i] - b[:, i]).max()) for i, s in enumerate(selectors)}

    out = output or str(Path(cfg.output).with_suffix(".compare.csv"))
    header = ["t"] + [f"{s.column}_{tag}" for s in selectors for tag in ("qll", "qllg")]
    rows = []
    for k in range(count):
        row: List[object] = [ll.records[k].t]
        for i in range(len(selectors)):
            row.extend([a[k, i], b[k, i]])
        rows.append(row)
    write_table(out, header, rows)
    for column, dev in deviations.items():
        logger.info("%s: max deviation %.3e", column, dev)
    logger.info("💾 comparison -> %s", out)
    return deviations


# ─── CLI ───────────────────────────────────────────────────
def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(t) for t in re.split(r"[,\s]+", text.strip()) if t]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrei", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="experiment file (KEY = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override an experiment key (repeatable)")
        p.add_argument("--scheme")
        p.add_argument("--h", type=float)
        p.add_argument("--t-final", type=float)
        p.add_argument("--engine", choices=("lrei", "dense"))
        p.add_argument("--output")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-sites", type=int, help="raise the site guard (LREI_MAX_SITES)")

    common(sub.add_parser("run", help="simulate and write CSV + manifest"))
    common(sub.add_parser("validate", help="check the configuration without computing"))
    common(sub.add_parser("compare", help="q-LL vs q-LLG on the rescaled time axis"))

    p = sub.add_parser("converge", help="endpoint error vs step size")
    common(p)
    p.add_argument("--schemes", type=_csv_list(str), default=["rk1", "rk2", "rk3", "rk4"])
    p.add_argument("--h-values", type=_csv_list(float), default=[0.05, 0.025, 0.0125, 0.00625])

    p = sub.add_parser("bench", help="seconds per step over a grid of sizes")
    common(p)
    p.add_argument("--n-values", type=_csv_list(int), default=[10, 11, 12])
    p.add_argument("--r-values", type=_csv_list(int), default=[3])
    p.add_argument("--schemes", type=_csv_list(str), default=["rk4", "ab4"])
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--dense", action="store_true", help="add EI seconds/step for n ≤ 10")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip().upper()] = value.strip()
    for flag, key in (("scheme", "SCHEME"), ("h", "H"), ("t_final", "T_FINAL"),
                      ("engine", "ENGINE"), ("output", "OUTPUT"), ("seed", "SEED")):
        value = getattr(args, flag)
        if value is not None:
            out[key] = str(value)
    return out


def dispatch(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.load(args.config, overrides_from_args(args))
    if args.command == "run":
        return run(cfg)
    if args.command == "validate":
        diag = validate(cfg)
        logger.info("✅ configuration valid; estimated memory %.3g MiB", diag.memory_bytes / 2 ** 20)
        for w in diag.warnings:
            logger.warning("⚠️ %s", w)
        return 0
    if args.command == "compare":
        compare_models(cfg)
        return 0
    if args.command == "converge":
        rows = convergence_study(cfg, args.schemes, args.h_values)
        out = str(Path(cfg.output).with_suffix(".converge.csv"))
        write_table(out, ["scheme", "h", "error", "fitted_order"], rows)
        logger.info("💾 convergence table -> %s", out)
        return 0
    if args.command == "bench":
        rows = benchmark(cfg, args.n_values, args.r_values, args.schemes, args.steps, args.dense)
        out = str(Path(cfg.output).with_suffix(".bench.csv"))
        header = ["n", "r", "scheme", "lattice", "edges", "seconds_per_step"]
        if args.dense:
            header.append("dense_seconds_per_step")
        table = []
        for row in rows:
            cells = [row.n, row.r, row.scheme, row.lattice, row.edges, row.seconds_per_step]
            if args.dense:
                cells.append("" if row.dense_seconds_per_step is None else row.dense_seconds_per_step)
            table.append(cells)
        write_table(out, header, table)
        logger.info("💾 benchmark table -> %s", out)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    if args.max_sites is not None:
        os.environ["LREI_MAX_SITES"] = str(args.max_sites)
    try:
        return dispatch(args)
    except LreiError as exc:
        logger.error("❌ %s", exc)
        return exc.exit_code
    except KeyboardInterrupt:
        logger.info("👋 Interrupted")
        return 130
    except Exception as exc:
        logger.exception("💥 Unexpected error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

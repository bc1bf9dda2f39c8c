"""settings.py – process-wide defaults for the LREI solver.
Everything here can be overridden from the environment or a .env file so runs
can be tuned without touching the code.
"""
import os
import sys
import logging
from pathlib import Path
from typing import Optional

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from errors import ResourceGuardError

# ─── CONFIG ────────────────────────────────────────────────
MAX_SITES        = int(os.getenv("LREI_MAX_SITES", "26"))
LOG_FILE         = os.getenv("LREI_LOG_FILE", "./logs/lrei.log")
LOG_LEVEL        = os.getenv("LREI_LOG_LEVEL", "INFO")
LANCZOS_SEED     = int(os.getenv("LREI_LANCZOS_SEED", "7"))
DENSE_MAX_DIM    = int(os.getenv("LREI_DENSE_MAX_DIM", str(2 ** 10)))
WORKERS          = int(os.getenv("LREI_WORKERS", "1"))

# Units: energies in meV, time in ps unless natural units are requested.
HBAR_MEV_PS   = 0.6582119569
BOHR_MAGNETON = 5.8e-2          # meV/T
G_FACTOR      = 2.0

PRUNE_TOL = 1e-15
RANK_TOL  = 1e-12


def hbar_for(units: str) -> float:
    if units == "natural":
        return 1.0
    if units == "meV_ps":
        return HBAR_MEV_PS
    raise ValueError(f"unknown unit system {units!r} (expected 'meV_ps' or 'natural')")


def gyromagnetic(hbar: float) -> float:
    """mu = -mu_B g / hbar."""
    return -BOHR_MAGNETON * G_FACTOR / hbar


def max_sites() -> int:
    """Site guard; read on every call so LREI_MAX_SITES can change at runtime."""
    return int(os.getenv("LREI_MAX_SITES", str(MAX_SITES)))


def check_sites(n_sites: int, limit: Optional[int] = None) -> None:
    limit = max_sites() if limit is None else limit
    if n_sites > limit:
        raise ResourceGuardError(
            f"{n_sites} sites exceeds the configured maximum of {limit} "
            f"(a single state vector would need {16 * 2 ** n_sites / 2 ** 30:.1f} GiB); "
            f"raise LREI_MAX_SITES to override"
        )


def check_dense(dim: int) -> None:
    if dim > DENSE_MAX_DIM:
        raise ResourceGuardError(
            f"dense path limited to dimension {DENSE_MAX_DIM}, got {dim}"
        )


# ─── LOGGING ───────────────────────────────────────────────
logger = logging.getLogger("lrei")


def setup_logging(log_file: Optional[str] = LOG_FILE, level: str = LOG_LEVEL) -> logging.Logger:
    """Attach file + stdout handlers to the ``lrei`` logger once."""
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    if logger.handlers:
        return logger
    fmt = logging.Formatter("%(asctime)s %(levelname)s: %(message)s")

    handlers = []
    if log_file:
        try:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            fh = logging.FileHandler(log_file)
            fh.setFormatter(fmt)
            handlers.append(fh)
        except Exception as exc:
            # stdout logging still works without the file
            sys.stderr.write(f"Warning: file logging disabled ({exc})\n")

    sh = logging.StreamHandler(sys.stdout)
    sh.setFormatter(fmt)
    handlers.append(sh)

    for h in handlers:
        logger.addHandler(h)
    return logger

import os
import sys
from pathlib import Path

# no file handler during tests
os.environ.setdefault("LREI_LOG_FILE", "")

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from lowrank import normalize_phase  # noqa: E402
from spinsys import HamiltonianParams, build_hamiltonian, chain  # noqa: E402
from states import LowRankState  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_factor(rng, N, r):
    Q, _ = np.linalg.qr(rng.standard_normal((N, r)) + 1j * rng.standard_normal((N, r)))
    return normalize_phase(Q)


def random_state(rng, n_sites, r, distinct=True):
    N = 2 ** n_sites
    if distinct:
        lam = np.sort(rng.uniform(0.2, 1.0, r))[::-1]
    else:
        lam = np.ones(r)
    return LowRankState(random_factor(rng, N, r), lam / lam.sum())


def chain_hamiltonian(n, J=1.0, d=(0.0, 0.0, 0.3), b=(0.4, 0.0, 0.2), hbar=1.0, periodic=False):
    lattice = chain(n, periodic)
    return build_hamiltonian(lattice, HamiltonianParams.uniform(lattice, J, d, b, hbar, mu=1.0))

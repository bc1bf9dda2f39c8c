#!/usr/bin/env python3
"""lanczos_debug.py – run one stage eigensolve and print Ritz residuals per restart setting."""
import os
import sys
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from dynamics import Model, ModelKind, rhs  # noqa: E402
from integrate import TABLEAUS, stage_sum  # noqa: E402
from lowrank import LanczosOptions, default_krylov_dim, lanczos_topk, normalize_phase  # noqa: E402
from spinsys import HamiltonianParams, build_hamiltonian, chain  # noqa: E402
from states import LowRankState  # noqa: E402

load_dotenv()
N_SITES = int(os.getenv("DEBUG_SITES", "10"))
RANK = int(os.getenv("DEBUG_RANK", "3"))
STEP = float(os.getenv("DEBUG_H", "0.01"))

lattice = chain(N_SITES)
H = build_hamiltonian(lattice, HamiltonianParams.uniform(lattice, 1.0, (0, 0, 0.4), (1, 0, 0), hbar=1.0))
rng = np.random.default_rng(0)
N = 2 ** N_SITES
Q, _ = np.linalg.qr(rng.standard_normal((N, RANK)) + 1j * rng.standard_normal((N, RANK)))
lam = np.arange(RANK, 0, -1, dtype=float)
state = LowRankState(normalize_phase(Q), lam / lam.sum())
model = ModelKind(Model.QLLG, 0.5, 1.0)

f = rhs(state, H, model)
lrs = stage_sum(state.V, state.lam, [f], TABLEAUS["rk1"].b, STEP)
print(f"N={N} r={RANK} blocks={lrs.block_count()} default m={default_krylov_dim(N, RANK)}")

for m in (RANK + 1, default_krylov_dim(N, RANK), 4 * RANK + 8):
    try:
        pairs = lanczos_topk(lrs.matvec, N, RANK, LanczosOptions(tol=1e-12, krylov_dim=m))
    except Exception as exc:
        print(f"m={m:3d}  ❌ {exc}")
        continue
    drift = np.abs(pairs.values - state.lam).max()
    print(f"m={m:3d}  restarts={pairs.restarts:3d}  matvecs={pairs.matvecs:5d}  "
          f"max_res={pairs.residuals.max():.2e}  drift={drift:.2e}")

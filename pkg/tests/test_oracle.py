import numpy as np
import pytest
import scipy.linalg as sla

from conftest import chain_hamiltonian, random_state
from dynamics import Model, ModelKind
from errors import ResourceGuardError, StateError
from integrate import TABLEAUS, evolve
from lowrank import LanczosOptions
from oracle import (
    EXPM_DENSE_MAX,
    DenseState,
    dense_evolve,
    dense_partial_eig,
    dense_rhs,
    ei_step,
    exact_rank1,
    krylov_expv,
    werner_density,
)
from states import LowRankState, ghz_state, w_state, af_state

TIGHT = LanczosOptions(tol=1e-12)


def test_dense_state_validation():
    with pytest.raises(StateError):
        DenseState(np.diag([0.5, 0.4]))
    with pytest.raises(StateError):
        DenseState(np.diag([1.2, -0.2]))
    with pytest.raises(StateError):
        DenseState(np.array([[0.5, 1.0], [0.0, 0.5]]))


def test_dense_state_guard(monkeypatch):
    import settings
    monkeypatch.setattr(settings, "DENSE_MAX_DIM", 4)
    with pytest.raises(ResourceGuardError):
        DenseState(np.eye(8) / 8)


def test_exact_rank1_is_unitary_without_damping():
    H = chain_hamiltonian(3)
    psi = af_state(1, 3)
    rho = exact_rank1(psi, H, ModelKind(Model.QLL, 0.0), 0.7).rho
    U = sla.expm(-1j * 0.7 * H.toarray())
    phi = U @ psi.amplitudes
    assert np.abs(rho - np.outer(phi, phi.conj())).max() <= 1e-12


@pytest.mark.parametrize("model", [Model.QLL, Model.QLLG])
def test_exact_rank1_solves_the_equation(model):
    H = chain_hamiltonian(3, hbar=0.8)
    kind = ModelKind(model, 0.5, 0.8)
    psi = w_state(3)
    t, dt = 0.4, 1e-5
    drho = (exact_rank1(psi, H, kind, t + dt).rho - exact_rank1(psi, H, kind, t - dt).rho) / (2 * dt)
    rhs = dense_rhs(exact_rank1(psi, H, kind, t), H, kind)
    assert np.abs(drho - rhs).max() <= 1e-7


def test_exact_rank1_stretch():
    H = chain_hamiltonian(3)
    psi = ghz_state(3)
    ll = exact_rank1(psi, H, ModelKind(Model.QLL, 0.5), 0.6).rho
    llg = exact_rank1(psi, H, ModelKind(Model.QLLG, 0.5), 0.6 * 1.25).rho
    assert np.abs(ll - llg).max() <= 1e-12


@pytest.mark.parametrize("kappa", [0.0, 0.5])
def test_exact_rank1_krylov_branch(kappa):
    n = 9
    H = chain_hamiltonian(n)
    assert EXPM_DENSE_MAX < H.dim <= 2 ** 10
    kind = ModelKind(Model.QLLG, kappa)
    psi = af_state(2, n)
    t = 0.5
    z = -(1j + kappa) * t / kind.time_stretch
    phi = sla.expm(z * H.toarray()) @ psi.amplitudes
    phi /= np.linalg.norm(phi)
    rho = exact_rank1(psi, H, kind, t).rho
    assert np.abs(rho - np.outer(phi, phi.conj())).max() <= 1e-9


def test_krylov_expv_matches_expm(rng):
    H = chain_hamiltonian(6).toarray()
    v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    v /= np.linalg.norm(v)
    z = -(1j + 0.5) * 2.0
    ref = sla.expm(z * H) @ v
    assert np.abs(krylov_expv(H, v, z) - ref).max() <= 1e-10 * np.abs(ref).max()


def test_lrei_and_dense_ei_agree(rng):
    for trial in range(20):
        n = 3 + trial % 4
        r = 1 + trial % 4
        model = Model.QLLG if trial % 2 else Model.QLL
        H = chain_hamiltonian(n, hbar=1.0)
        state = random_state(rng, n, r)
        kind = ModelKind(model, 0.5)
        lrei = evolve(state, H, kind, "rk4", 0.01, 0.1, opts=TIGHT).final.to_dense()
        dense = dense_evolve(state, H, kind, TABLEAUS["rk4"], 0.01, 0.1).final.to_dense()
        assert np.abs(lrei - dense).max() <= 1e-8, (n, r, model)


def test_lrei_and_dense_ei_agree_at_eight_sites(rng):
    H = chain_hamiltonian(8)
    state = random_state(rng, 8, 4)
    kind = ModelKind(Model.QLLG, 0.5)
    lrei = evolve(state, H, kind, "rk4", 0.01, 0.1, opts=TIGHT).final.to_dense()
    dense = dense_evolve(state, H, kind, TABLEAUS["rk4"], 0.01, 0.1).final.to_dense()
    assert np.abs(lrei - dense).max() <= 1e-8


@pytest.mark.parametrize("p", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("model", [Model.QLLG, Model.QLL])
def test_werner_reduction(p, model):
    n, h, steps = 4, 0.01, 100
    H = chain_hamiltonian(n)
    psi = ghz_state(n)
    kind = ModelKind(model, 0.5)

    rho = werner_density(psi, p)
    spectrum = rho.spectrum()
    for _ in range(steps):
        rho = ei_step(rho, H, kind, TABLEAUS["rk4"], h, spectrum)

    hat = evolve(LowRankState.pure(psi), H, kind.werner(p), "rk4", h, h * steps, opts=TIGHT).final
    rebuilt = p * np.eye(2 ** n) / 2 ** n + (1 - p) * hat.to_dense()
    assert np.abs(rebuilt - rho.rho).max() <= 1e-8


def test_ei_step_preserves_spectrum(rng):
    H = chain_hamiltonian(4)
    state = random_state(rng, 4, 3)
    rho = DenseState.from_low_rank(state)
    out = ei_step(rho, H, ModelKind(Model.QLLG, 0.5), TABLEAUS["rk3"], 0.05,
                  np.concatenate([state.lam, np.zeros(13)]))
    assert np.allclose(out.spectrum()[:3], state.lam, atol=1e-12)
    back = out.to_low_rank(state.lam)
    assert np.abs(back.to_dense() - out.rho).max() <= 1e-12


def test_dense_partial_eig(rng):
    state = random_state(rng, 4, 2)
    V, w = dense_partial_eig(state.to_dense(), 2)
    assert np.allclose(w, state.lam)
    assert np.allclose(V @ V.conj().T, state.V @ state.V.conj().T)

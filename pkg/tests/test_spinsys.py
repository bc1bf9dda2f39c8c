import numpy as np
import pytest

import settings
from errors import ResourceGuardError
from spinsys import (
    PAULI,
    HamiltonianParams,
    SpinLattice,
    build_hamiltonian,
    chain,
    magnetization_operator,
    spin_operator,
    triangular,
)

I2 = np.eye(2)


def dense_spin(site, axis, n, hbar=1.0):
    out = np.array([[1.0]])
    for s in range(1, n + 1):
        out = np.kron(out, 0.5 * hbar * PAULI[axis] if s == site else I2)
    return out


def dense_hamiltonian(lattice, J, dmi, b, mu, hbar):
    n = lattice.n_sites
    S = {(s, a): dense_spin(s, a, n, hbar) for s in range(1, n + 1) for a in "xyz"}
    H = np.zeros((2 ** n, 2 ** n), dtype=complex)
    for i, j in lattice.edges:
        H += (2 * J / hbar ** 2) * sum(S[i, a] @ S[j, a] for a in "xyz")
        dx, dy, dz = dmi
        cross = (dx * (S[i, "y"] @ S[j, "z"] - S[i, "z"] @ S[j, "y"])
                 + dy * (S[i, "z"] @ S[j, "x"] - S[i, "x"] @ S[j, "z"])
                 + dz * (S[i, "x"] @ S[j, "y"] - S[i, "y"] @ S[j, "x"]))
        H += (2 / hbar ** 2) * cross
    for s in range(1, n + 1):
        H -= mu * sum(bv * S[s, a] for bv, a in zip(b, "xyz"))
    return H


def test_spin_operator_single_site_z():
    S = spin_operator(1, "z", 1, hbar=1.0)
    assert np.allclose(S.toarray(), np.diag([0.5, -0.5]))


def test_spin_operator_x_on_first_of_two():
    S = spin_operator(1, "x", 2, hbar=1.0).toarray()
    expected = np.zeros((4, 4))
    for a, b in ((0, 2), (1, 3), (2, 0), (3, 1)):
        expected[a, b] = 0.5
    assert np.allclose(S, expected)


def test_spin_operator_matches_kronecker():
    S = spin_operator(2, "y", 2, hbar=2.0)
    assert np.allclose(S.toarray(), np.kron(I2, PAULI["y"]))
    assert S.nnz == 4


@pytest.mark.parametrize("site", [0, 3])
def test_spin_operator_site_out_of_range(site):
    with pytest.raises(ValueError):
        spin_operator(site, "z", 2)


def test_dimer_singlet_triplet():
    lattice = chain(2)
    H = build_hamiltonian(lattice, HamiltonianParams(J=1.0, hbar=1.0))
    ev = np.sort(np.linalg.eigvalsh(H.toarray()))
    assert np.allclose(ev, [-1.5, 0.5, 0.5, 0.5])


def test_pure_zeeman():
    lattice = SpinLattice.custom(1, [])
    H = build_hamiltonian(lattice, HamiltonianParams(b_field=(0, 0, 1), mu=1.0, hbar=1.0))
    assert np.allclose(H.toarray(), np.diag([-0.5, 0.5]))


def test_default_gyromagnetic_constant():
    params = HamiltonianParams(hbar=settings.HBAR_MEV_PS)
    assert params.gyromagnetic == pytest.approx(-5.8e-2 * 2 / settings.HBAR_MEV_PS)


def test_triangular_with_dmi_and_field_matches_dense(rng):
    lattice = triangular(2, 4, periodic=True)
    d, b = (0.0, 0.0, 0.4), (1.0, 0.0, 0.0)
    params = HamiltonianParams.uniform(lattice, 1.0, d, b, settings.HBAR_MEV_PS)
    H = build_hamiltonian(lattice, params)
    dense = dense_hamiltonian(lattice, 1.0, d, b, params.gyromagnetic, settings.HBAR_MEV_PS)

    assert H.hermiticity_error() <= 1e-14
    assert np.abs(H.toarray() - dense).max() <= 1e-12
    x = rng.standard_normal(H.dim) + 1j * rng.standard_normal(H.dim)
    assert np.linalg.norm(H @ x - dense @ x) <= 1e-12 * np.linalg.norm(dense @ x)


def test_hamiltonian_is_sparse():
    n = 10
    H = build_hamiltonian(chain(n, periodic=True), HamiltonianParams(J=1.0, hbar=1.0))
    assert H.nnz <= H.dim * (1 + len(chain(n, periodic=True).edges))


def test_magnetization_z():
    assert np.allclose(magnetization_operator("z", 1).toarray(), np.diag([0.5, -0.5]))
    assert np.allclose(magnetization_operator("z", 2).toarray(), np.diag([0.5, 0, 0, -0.5]))


def test_magnetization_x_three_sites():
    M = magnetization_operator("x", 3).toarray()
    expected = sum(dense_spin(s, "x", 3) for s in (1, 2, 3)) / 3
    assert np.allclose(M, expected, atol=1e-15)


def test_lattice_validation():
    with pytest.raises(ValueError):
        SpinLattice(3, ((1, 1),))
    with pytest.raises(ValueError):
        SpinLattice(3, ((1, 2), (1, 2)))
    with pytest.raises(ValueError):
        SpinLattice(3, ((1, 4),))


def test_chain_edges():
    assert chain(4).edges == ((1, 2), (2, 3), (3, 4))
    assert chain(4, periodic=True).edges[-1] == (1, 4)


def test_site_guard(monkeypatch):
    monkeypatch.setenv("LREI_MAX_SITES", "12")
    with pytest.raises(ResourceGuardError):
        build_hamiltonian(chain(13), HamiltonianParams(hbar=1.0))

import numpy as np
import pytest

from conftest import chain_hamiltonian, random_state
from errors import ObservableError
from observe import (
    Probe,
    ReducedDensity2,
    Selector,
    concurrence,
    expectation,
    factor_trace,
    negativity,
    parse_selector,
    reduced_density_2spin,
    split_selectors,
    trace_power,
    werner_expectation,
    werner_reduced_density,
    werner_trace_power,
)
from spinsys import SparseHermitian, magnetization_operator
from states import LowRankState, PureState, af_state, basis_state, ghz_state, mix


def dense_pair(rho, n, k, l):
    others = [s for s in range(n) if s not in (k - 1, l - 1)]
    perm = [k - 1, l - 1] + others + [n + k - 1, n + l - 1] + [n + s for s in others]
    M = 2 ** (n - 2)
    T = rho.reshape([2] * (2 * n)).transpose(perm).reshape(4, M, 4, M)
    return np.einsum("ajbj->ab", T)


def test_magnetization_of_basis_states():
    Mz = magnetization_operator("z", 2)
    assert expectation(Mz, LowRankState.pure(basis_state(1, 2))) == pytest.approx(0.5)
    assert expectation(Mz, LowRankState.pure(af_state(1, 2))) == pytest.approx(0.0)


def test_expectation_matches_dense(rng):
    H = chain_hamiltonian(4)
    state = random_state(rng, 4, 3)
    ref = np.trace(H.toarray() @ state.to_dense()).real
    assert expectation(H, state) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("pair", [(1, 2), (1, 3), (2, 4), (4, 1), (3, 2)])
def test_reduced_density_matches_partial_trace(rng, pair):
    state = random_state(rng, 4, 2)
    R = reduced_density_2spin(state, *pair)
    assert np.abs(R.matrix - dense_pair(state.to_dense(), 4, *pair)).max() <= 1e-12


def test_bell_state_measures():
    R = reduced_density_2spin(LowRankState.pure(ghz_state(2)), 1, 2)
    assert concurrence(R) == pytest.approx(1.0, abs=1e-10)
    assert negativity(R) == pytest.approx(0.5, abs=1e-12)


def test_product_state_is_unentangled():
    R = reduced_density_2spin(LowRankState.pure(af_state(1, 3)), 1, 3)
    assert concurrence(R) == pytest.approx(0.0, abs=1e-10)
    assert negativity(R) == pytest.approx(0.0, abs=1e-12)


def random_qubit(rng):
    q = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    return q / np.linalg.norm(q)


def test_separable_states_are_unentangled(rng):
    products = [PureState.normalized(np.kron(np.kron(random_qubit(rng), random_qubit(rng)), random_qubit(rng)))
                for _ in range(3)]
    R = reduced_density_2spin(LowRankState.pure(products[0]), 1, 2)
    assert negativity(R) == pytest.approx(0.0, abs=1e-10)
    assert concurrence(R) == pytest.approx(0.0, abs=1e-6)
    R = reduced_density_2spin(mix(products, [0.5, 0.3, 0.2]), 1, 2)
    assert negativity(R) == pytest.approx(0.0, abs=1e-10)
    assert concurrence(R) == pytest.approx(0.0, abs=1e-6)


def test_expectation_is_linear(rng):
    H = chain_hamiltonian(4)
    Mz = magnetization_operator("z", 4)
    state = random_state(rng, 4, 3)
    combined = SparseHermitian((2 * H.matrix + 3 * Mz.matrix).tocsr())
    assert expectation(combined, state) == pytest.approx(
        2 * expectation(H, state) + 3 * expectation(Mz, state), abs=1e-12)


def test_werner_bell_measures():
    state = LowRankState.pure(ghz_state(2))
    R = werner_reduced_density(state, 0.5, 1, 2)
    assert concurrence(R) == pytest.approx(0.25, abs=1e-10)
    assert negativity(R) == pytest.approx(0.125, abs=1e-12)
    R = werner_reduced_density(state, 0.7, 1, 2)
    assert concurrence(R) == pytest.approx(0.0, abs=1e-10)
    assert negativity(R) == pytest.approx(0.0, abs=1e-12)


def test_werner_wrappers_match_dense(rng):
    H = chain_hamiltonian(3)
    state = random_state(rng, 3, 1)
    p = 0.3
    rho = p * np.eye(8) / 8 + (1 - p) * state.to_dense()
    assert werner_expectation(H, state, p) == pytest.approx(np.trace(H.toarray() @ rho).real, abs=1e-12)
    for m in (1, 2, 3):
        ref = np.sum(np.linalg.eigvalsh(rho) ** m)
        assert werner_trace_power(state, p, m) == pytest.approx(ref, abs=1e-12)
    R = werner_reduced_density(state, p, 1, 3)
    assert np.abs(R.matrix - dense_pair(rho, 3, 1, 3)).max() <= 1e-12


def test_trace_helpers(rng):
    state = random_state(rng, 4, 3)
    assert factor_trace(state) == pytest.approx(1.0, abs=1e-12)
    assert trace_power(state, 2) == pytest.approx(np.sum(state.lam ** 2))
    with pytest.raises(ValueError):
        trace_power(state, 0)


def test_invalid_reduced_density():
    with pytest.raises(ObservableError):
        ReducedDensity2(np.eye(4) / 2, (1, 2))
    with pytest.raises(ObservableError):
        ReducedDensity2(np.diag([0.6, 0.6, -0.2, 0.0]), (1, 2))


def test_selectors():
    assert parse_selector("Energy") == Selector("energy")
    sel = parse_selector("concurrence: 1, 3", n_sites=3)
    assert sel.pair == (1, 3) and sel.column == "concurrence_1_3"
    for bad in ("entropy", "concurrence:1,1", "negativity:1,5"):
        with pytest.raises(ValueError):
            parse_selector(bad, n_sites=4)


def test_split_selectors():
    assert split_selectors("energy mz; concurrence: 1, 2  negativity:1,2") == [
        "energy", "mz", "concurrence:1,2", "negativity:1,2"]


def test_probe_record(rng):
    H = chain_hamiltonian(3)
    selectors = [parse_selector(s, 3) for s in ("energy", "mx", "mz", "purity", "concurrence:1,2", "negativity:2,3")]
    probe = Probe(H, selectors)
    state = random_state(rng, 3, 2)
    rec = probe(0.5, state)
    assert probe.columns == ["energy", "mx", "mz", "purity", "concurrence_1_2", "negativity_2_3"]
    row = rec.row(selectors)
    assert row[0] == pytest.approx(expectation(H, state))
    assert row[2] == pytest.approx(expectation(magnetization_operator("z", 3), state))
    assert row[3] == pytest.approx(np.sum(state.lam ** 2))
    assert rec.pair_measures[(1, 2)].negativity is None
    assert 0.0 <= row[4] <= 1.0 and row[5] >= 0.0


def test_werner_probe_trace():
    state = LowRankState.pure(ghz_state(2))
    probe = Probe(chain_hamiltonian(2), [parse_selector("trace"), parse_selector("concurrence:1,2")], werner_p=0.5)
    rec = probe(0.0, state)
    assert rec.trace == pytest.approx(1.0)
    assert rec.pair_measures[(1, 2)].concurrence == pytest.approx(0.25, abs=1e-10)

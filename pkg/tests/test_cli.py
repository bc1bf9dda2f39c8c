import csv
import json
import math

import pytest

import lrei
from errors import ConfigError, ResourceGuardError, StepGridError

BASE = """\
# small chain used across the CLI tests
MODEL = qllg
N_SITES = 4
LATTICE = chain
J = 1.0
DMI = 0, 0, 0.4
B_FIELD = 1, 0, 0
KAPPA = 0.5
UNITS = natural
INITIAL_STATE = af2
SCHEME = rk4
H = 0.05
T_FINAL = 0.05
OBSERVABLES = energy mz purity concurrence:1,2
"""


@pytest.fixture
def experiment(tmp_path):
    def write(extra: str = "", base: str = BASE):
        path = tmp_path / "experiment.env"
        path.write_text(base + extra + f"OUTPUT = {tmp_path / 'out.csv'}\n")
        return path
    return write


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_load_parses_every_field(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()))
    assert cfg.model == "qllg" and cfg.n_sites == 4
    assert cfg.dmi == (0.0, 0.0, 0.4)
    assert cfg.observables == ("energy", "mz", "purity", "concurrence:1,2")
    assert cfg.hbar == 1.0
    assert cfg.lines["KAPPA"] == 8


def test_override_wins(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"KAPPA": "0.1", "SCHEME": "rk2"})
    assert cfg.kappa == 0.1 and cfg.scheme == "rk2"
    assert "KAPPA" not in cfg.lines


def test_unknown_key_reports_line(experiment):
    with pytest.raises(ConfigError) as info:
        lrei.ExperimentConfig.load(str(experiment("GAMMA = 3\n")))
    assert info.value.field == "GAMMA"
    assert info.value.line == 15


def test_bad_value_reports_field_and_line(experiment):
    with pytest.raises(ConfigError) as info:
        lrei.ExperimentConfig.load(str(experiment()), {"DMI": "1,2"})
    assert info.value.field == "DMI"
    with pytest.raises(ConfigError) as info:
        lrei.ExperimentConfig.load(str(experiment("PERIODIC = maybe\n")))
    assert info.value.field == "PERIODIC" and info.value.line == 15


@pytest.mark.parametrize("overrides,field", [
    ({"KAPPA": "-0.1"}, "KAPPA"),
    ({"MODEL": "llb"}, "MODEL"),
    ({"UNITS": "si"}, "UNITS"),
    ({"INITIAL_STATE": "basis:17"}, "INITIAL_STATE"),
    ({"OBSERVABLES": "negativity:1,9"}, "OBSERVABLES"),
    ({"LATTICE": "custom"}, "EDGES"),
    ({"LATTICE": "triangular", "LATTICE_ROWS": "2", "LATTICE_COLS": "3"}, "N_SITES"),
    ({"ENGINE": "dense", "SCHEME": "ab2"}, "ENGINE"),
    ({"J": "nan"}, "J"),
])
def test_validation_errors(experiment, overrides, field):
    with pytest.raises(ConfigError) as info:
        lrei.ExperimentConfig.load(str(experiment()), overrides)
    assert info.value.field == field


def test_unknown_scheme_lists_valid_ones(experiment):
    with pytest.raises(ConfigError, match="rk1, rk2, rk3, rk4, ab2, ab3, ab4"):
        lrei.ExperimentConfig.load(str(experiment()), {"SCHEME": "rk7"})


def test_multistep_grid_must_be_integral(experiment):
    with pytest.raises(StepGridError):
        lrei.ExperimentConfig.load(str(experiment()), {"SCHEME": "ab3", "H": "0.03", "T_FINAL": "0.1"})


def test_triangular_and_custom_lattices(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "LATTICE": "triangular", "LATTICE_ROWS": "2", "LATTICE_COLS": "2", "PERIODIC": "false"})
    assert cfg.spin_lattice().edges == ((1, 2), (1, 3), (1, 4), (2, 4), (3, 4))
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"LATTICE": "custom", "EDGES": "1-2, 3-2, 4-1"})
    assert cfg.spin_lattice().edges == ((1, 2), (2, 3), (1, 4))


FULL_RANK = "mix:[(basis:1,0.4),(basis:2,0.3),(basis:3,0.2),(basis:4,0.1)]"


def test_full_rank_mixture_is_rejected(experiment):
    with pytest.raises(ConfigError) as info:
        lrei.ExperimentConfig.load(str(experiment()), {
            "N_SITES": "2", "OBSERVABLES": "energy purity", "INITIAL_STATE": FULL_RANK})
    assert info.value.field == "INITIAL_STATE"
    path = str(experiment())
    assert lrei.main(["run", path, "--set", "N_SITES=2", "--set", "OBSERVABLES=energy purity",
                      "--set", f"INITIAL_STATE={FULL_RANK}"]) == 2


def test_resized_lattices_keep_their_preset(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "LATTICE": "triangular", "LATTICE_ROWS": "2", "LATTICE_COLS": "2"})
    assert cfg.spin_lattice(4).preset == "triangular"
    assert cfg.spin_lattice(4) == cfg.spin_lattice()
    six = cfg.spin_lattice(6)
    assert six.preset == "triangular" and six.n_sites == 6
    assert len(six.edges) == 9
    assert cfg.spin_lattice(5).n_sites == 5

    cfg = lrei.ExperimentConfig.load(str(experiment()), {"LATTICE": "custom", "EDGES": "1-2, 3-2, 4-1"})
    assert cfg.spin_lattice(4).edges == ((1, 2), (2, 3), (1, 4))
    with pytest.raises(ConfigError) as info:
        cfg.spin_lattice(5)
    assert info.value.field == "EDGES"
    with pytest.raises(ConfigError):
        lrei.benchmark(cfg, [4, 5], [1], ["rk2"])


def test_site_guard(experiment, monkeypatch):
    monkeypatch.setenv("LREI_MAX_SITES", "3")
    with pytest.raises(ResourceGuardError):
        lrei.ExperimentConfig.load(str(experiment()))


def test_run_writes_two_rows_and_manifest(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()))
    assert lrei.run(cfg) == 0
    rows = read_rows(tmp_path / "out.csv")
    assert rows[0] == ["t", "energy", "mz", "purity", "concurrence_1_2"]
    assert len(rows) == 3
    assert rows[1][0] == "0" and float(rows[2][0]) == pytest.approx(0.05)
    assert float(rows[1][3]) == 1.0
    assert b"\r" not in (tmp_path / "out.csv").read_bytes()

    manifest = json.loads((tmp_path / "out.csv.manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["steps"] == 1
    assert manifest["peak_live_blocks"] <= 9
    assert manifest["config"]["SCHEME"] == "rk4"
    assert manifest["version"] == lrei.__version__


def test_run_is_deterministic(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "INITIAL_STATE": "mix:[(af1,0.6),(af2,0.3),(ghz,0.1)]", "T_FINAL": "0.2"})
    lrei.run(cfg)
    first = (tmp_path / "out.csv").read_bytes()
    lrei.run(cfg)
    assert (tmp_path / "out.csv").read_bytes() == first


def test_dense_engine_matches_lrei(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"T_FINAL": "0.2", "OBSERVABLES": "energy mx mz purity"})
    lrei.run(cfg)
    low = read_rows(tmp_path / "out.csv")
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"T_FINAL": "0.2", "ENGINE": "dense", "OBSERVABLES": "energy mx mz purity"})
    lrei.run(cfg)
    dense = read_rows(tmp_path / "out.csv")
    assert len(low) == len(dense)
    for a, b in zip(low[1:], dense[1:]):
        assert [float(x) for x in a] == pytest.approx([float(x) for x in b], abs=1e-8)


def test_werner_run_reports_reconstructed_observables(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "INITIAL_STATE": "werner:(ghz,0.5)", "OBSERVABLES": "trace purity concurrence:1,4"})
    lrei.run(cfg)
    rows = read_rows(tmp_path / "out.csv")
    first = [float(x) for x in rows[1]]
    assert first[1] == pytest.approx(1.0)
    # GHZ on four sites: pair (1,4) alone is unentangled
    assert first[3] == pytest.approx(0.0, abs=1e-10)
    manifest = json.loads((tmp_path / "out.csv.manifest.json").read_text())
    assert manifest["effective_kappa"] == pytest.approx(0.25)


def test_aborted_run_keeps_partial_output(experiment, tmp_path, monkeypatch):
    import integrate

    calls = {"n": 0}
    real = integrate.rk_step

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise integrate.NumericalAbort("injected failure", 2)
        return real(*args, **kwargs)

    monkeypatch.setattr(integrate, "rk_step", flaky)
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"T_FINAL": "0.15"})
    with pytest.raises(integrate.NumericalAbort):
        lrei.run(cfg)
    assert len(read_rows(tmp_path / "out.csv")) == 3
    manifest = json.loads((tmp_path / "out.csv.manifest.json").read_text())
    assert manifest["status"] == "aborted"
    assert "injected failure" in manifest["error"]


def test_unexpected_failure_marks_manifest_failed(experiment, tmp_path, monkeypatch):
    import integrate

    calls = {"n": 0}
    real = integrate.rk_step

    def broken(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("solver blew up")
        return real(*args, **kwargs)

    monkeypatch.setattr(integrate, "rk_step", broken)
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"T_FINAL": "0.15"})
    with pytest.raises(RuntimeError):
        lrei.run(cfg)
    manifest = json.loads((tmp_path / "out.csv.manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "solver blew up" in manifest["error"]
    assert manifest["rows"] == 2


def test_validate_reports_memory_for_large_runs(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"N_SITES": "26", "OBSERVABLES": "energy"})
    diag = lrei.validate(cfg)
    assert diag.memory_bytes > 2 ** 30
    assert any("memory" in w for w in diag.warnings)


def test_compare_pure_state_coincides(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "H": "0.01", "T_FINAL": "0.3", "OBSERVABLES": "energy mx mz"})
    deviations = lrei.compare_models(cfg, str(tmp_path / "cmp.csv"))
    assert max(deviations.values()) <= 1e-8
    header = read_rows(tmp_path / "cmp.csv")[0]
    assert header == ["t", "energy_qll", "energy_qllg", "mx_qll", "mx_qllg", "mz_qll", "mz_qllg"]


def test_compare_mixed_state_diverges(experiment, tmp_path):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "H": "0.01", "T_FINAL": "2.0", "OBSERVABLES": "energy mx mz",
        "INITIAL_STATE": "mix:[(af1,0.6),(af2,0.4)]"})
    deviations = lrei.compare_models(cfg, str(tmp_path / "cmp.csv"))
    assert max(deviations.values()) > 1e-2


def test_convergence_study_rank1(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {"T_FINAL": "0.5", "H": "0.05"})
    rows = lrei.convergence_study(cfg, ["rk2", "rk4"], [0.05, 0.025, 0.0125])
    assert len(rows) == 6
    by_scheme = {row.scheme: row.fitted_order for row in rows}
    assert by_scheme["rk2"] == pytest.approx(2, abs=0.3)
    assert by_scheme["rk4"] == pytest.approx(4, abs=0.3)


def test_fitted_order():
    hs = [0.1, 0.05, 0.025]
    assert lrei.fitted_order(hs, [h ** 3 for h in hs]) == pytest.approx(3.0)
    assert lrei.fitted_order([0.1], [1e-3]) != lrei.fitted_order([0.1], [1e-3])  # nan


def test_benchmark_skips_guarded_cells(experiment, monkeypatch):
    monkeypatch.setenv("LREI_MAX_SITES", "6")
    cfg = lrei.ExperimentConfig.load(str(experiment()))
    rows = lrei.benchmark(cfg, [5, 7], [2], ["rk2", "ab2"], steps=5, dense=True)
    assert len(rows) == 4
    ok = [row for row in rows if row.n == 5]
    assert all(row.seconds_per_step > 0 for row in ok)
    assert all(row.dense_seconds_per_step > 0 for row in ok)
    skipped = [row for row in rows if row.n == 7]
    assert all(row.seconds_per_step != row.seconds_per_step for row in skipped)


def test_benchmark_reports_failed_cells_as_nan(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()))
    rows = lrei.benchmark(cfg, [2, 3], [4], ["rk2"], steps=5)
    by_n = {row.n: row for row in rows}
    assert math.isnan(by_n[2].seconds_per_step)
    assert by_n[3].seconds_per_step > 0
    assert by_n[2].lattice == "chain" and by_n[2].edges == 1


def test_benchmark_rows_record_the_lattice(experiment):
    cfg = lrei.ExperimentConfig.load(str(experiment()), {
        "LATTICE": "triangular", "LATTICE_ROWS": "2", "LATTICE_COLS": "2"})
    rows = lrei.benchmark(cfg, [4, 6], [2], ["rk2"], steps=5)
    by_n = {row.n: row for row in rows}
    assert {row.lattice for row in rows} == {"triangular"}
    assert by_n[4].edges == len(cfg.spin_lattice().edges)
    assert by_n[6].edges == 9


def test_main_exit_codes(experiment, tmp_path, monkeypatch):
    path = str(experiment())
    assert lrei.main(["validate", path]) == 0
    assert lrei.main(["run", path, "--set", "SCHEME=rk9"]) == 2
    assert lrei.main(["run", path, "--set", "N_SITES=40"]) == 4
    assert lrei.main(["validate", str(tmp_path / "missing.env")]) == 2
    assert lrei.main(["run", path, "--h", "0.025", "--t-final", "0.05"]) == 0
    assert len(read_rows(tmp_path / "out.csv")) == 3

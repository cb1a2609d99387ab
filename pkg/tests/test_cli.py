import csv
import json
import math

import pytest

from chaoslab.cli import COLUMNS, EXIT_PRECONDITION, EXIT_VALIDATION, main, resolve_seed
from chaoslab.errors import ValidationError
from chaoslab.scenario import Scenario, ScenarioError

FAST = """
name = "fast"
kind = "interacting"
seed = 5
[grid]
N = 4
[driver]
preset = "mean-linear"
alpha = 0.5
[terminal]
preset = "brownian"
g = 1.0
scale = 0.5
[sizes]
ns = [4, 8, 16, 32]
reps = 30
reference_cloud = 512
batch = 256
min_systems = 8
[study]
tail_n = 8
block_n = 8
k_blocks = [1, 2]
"""


def write(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def run_cli(tmp_path, *argv):
    out = tmp_path / "out"
    code = main([*argv, "--out", str(out)])
    return code, out


# scenario loading ---------------------------------------------------------------

def test_minimal_file_gets_defaults(tmp_path):
    sc = Scenario.load(write(tmp_path, 'name = "m"\nkind = "interacting"\n'))
    assert sc["grid"]["N"] == 64
    assert sc["sizes"]["cloud_size"] == 4096
    assert sc["sizes"]["reps"] == 64
    assert sc["dimensions"] == {"d": 1, "m": 1}


def test_q_equal_p_cites_invariant():
    with pytest.raises(ScenarioError, match="p<q<k"):
        Scenario.loads('name = "x"\n[rates]\np = 1.0\nq = 1.0\n')


def test_unknown_preset_lists_registry():
    with pytest.raises(ScenarioError) as err:
        Scenario.loads('[driver]\npreset = "wobble"\n')
    for name in ("mean-linear", "mean-reversion", "convolution", "null"):
        assert name in str(err.value)


def test_parse_error_reports_line():
    with pytest.raises(ScenarioError, match="line 3"):
        Scenario.loads('name = "x"\n[grid]\nN = = 3\n')


@pytest.mark.parametrize("text,field", [
    ("[grid]\nN = 0\n", "grid.N"),
    ("[grid]\nT = -1.0\n", "grid.T"),
    ("[sizes]\nns = [8, 4]\n", "sizes.ns"),
    ("[sizes]\nreps = 0\n", "sizes.reps"),
    ("[driver]\npreset = \"mean-linear\"\nbeta = 2.0\n", "driver.beta"),
    ("bogus = 1\n", "bogus"),
    ("[grid]\nsteps = 3\n", "grid.steps"),
    ("kind = \"linear-interaction\"\n[driver]\npreset = \"mean-linear\"\n", "driver.preset"),
    ("[dimensions]\nd = 2\nm = 1\n", "dimensions.m"),
])
def test_field_diagnostics(text, field):
    with pytest.raises(ScenarioError, match=field.replace(".", r"\.")):
        Scenario.loads(text)


def test_hash_stable_under_reordering():
    a = Scenario.loads('name = "h"\nseed = 3\n[grid]\nN = 8\nT = 1.0\n[driver]\npreset = "mean-linear"\nalpha = 0.5\n')
    b = Scenario.loads('seed = 3\nname = "h"\n[grid]\nT = 1.0\nN = 8\n[driver]\nalpha = 0.5\npreset = "mean-linear"\n')
    assert a.hash == b.hash
    assert a.hash != a.with_seed(4).hash


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        Scenario.load(tmp_path / "nope.toml")


def test_seed_resolution():
    assert resolve_seed(4, {"CHAOSLAB_SEED": "9"}) == 4
    assert resolve_seed(None, {"CHAOSLAB_SEED": "9"}) == 9
    assert resolve_seed(None, {}) is None
    with pytest.raises(ValidationError):
        resolve_seed(None, {"CHAOSLAB_SEED": "x"})


# runs ---------------------------------------------------------------------------

def test_simulate_header_and_determinism(tmp_path):
    path = write(tmp_path, FAST)
    code, out = run_cli(tmp_path, "simulate", "--scenario", str(path))
    assert code == 0
    sc = Scenario.load(path)
    csv_path = out / sc.hash / "simulate.csv"
    first = csv_path.read_bytes()
    rows = read_csv(csv_path)
    assert rows[0] == COLUMNS["simulate"]
    assert len(rows) == 1 + 5 * 4
    code, _ = run_cli(tmp_path, "simulate", "--scenario", str(path))
    assert csv_path.read_bytes() == first
    side = json.loads((out / sc.hash / "simulate.json").read_text())
    assert side["schema_version"] == 1 and side["status"] == "ok"
    assert side["scenario_hash"] == sc.hash


@pytest.mark.parametrize("command", ["rate-study", "sup-study", "process-error"])
def test_studies_identical_across_workers(tmp_path, command):
    path = write(tmp_path, FAST)
    h = Scenario.load(path).hash
    code1, out = run_cli(tmp_path, command, "--scenario", str(path), "--workers", "1")
    one = (out / h / f"{command}.csv").read_bytes()
    code4, out = run_cli(tmp_path, command, "--scenario", str(path), "--workers", "4")
    four = (out / h / f"{command}.csv").read_bytes()
    assert code1 == code4 == 0 and one == four
    rows = read_csv(out / h / f"{command}.csv")
    assert rows[0] == ["n", "estimate", "stderr", "reference"]
    side = json.loads((out / h / f"{command}.json").read_text())
    assert side["payload"]["slope"] is not None
    assert side["payload_digest"] is not None


def test_deterministic_rate_study_has_null_slope(tmp_path):
    text = FAST.replace('[terminal]\npreset = "brownian"\ng = 1.0\nscale = 0.5', '[terminal]\npreset = "constant"\nc = 2.0')
    text = text.replace('preset = "mean-linear"\nalpha = 0.5', 'preset = "null"')
    path = write(tmp_path, text)
    code, out = run_cli(tmp_path, "rate-study", "--scenario", str(path))
    h = Scenario.load(path).hash
    rows = read_csv(out / h / "rate-study.csv")
    assert code == 0 and all(float(r[1]) == 0.0 for r in rows[1:])
    assert json.loads((out / h / "rate-study.json").read_text())["payload"]["slope"] is None


def test_tails_refusal(tmp_path):
    text = FAST.replace("reps = 30", "reps = 10") + "epsilons = [2.0, 3.0]\n"
    path = write(tmp_path, text)
    code, out = run_cli(tmp_path, "tails", "--scenario", str(path))
    assert code == EXIT_PRECONDITION
    side = json.loads((out / Scenario.load(path).hash / "tails.json").read_text())
    assert side["status"] == "error" and side["error"]["code"] == "precondition"
    assert "reps*tail >= 5" in side["error"]["message"]


def test_tails_and_blocks_outputs(tmp_path):
    path = write(tmp_path, FAST)
    h = Scenario.load(path).hash
    assert run_cli(tmp_path, "tails", "--scenario", str(path), "--plot")[0] == 0
    out = tmp_path / "out" / h
    assert read_csv(out / "tails.csv")[0] == COLUMNS["tails"]
    assert (out / "tails.png").stat().st_size > 0
    assert run_cli(tmp_path, "blocks", "--scenario", str(path))[0] == 0
    rows = read_csv(out / "blocks.csv")
    assert rows[0] == COLUMNS["blocks"] and len(rows) == 3


def test_pde_compare(tmp_path):
    text = """
kind = "pde"
seed = 2
[grid]
N = 4
[pde]
preset = "affine"
beta = 1.0
gamma = 1.0
[sizes]
ns = [2, 4, 8, 16]
reps = 4
cloud_size = 1024
batch = 256
min_systems = 8
[study]
empirical_cloud = 128
"""
    path = write(tmp_path, text)
    code, out = run_cli(tmp_path, "pde-compare", "--scenario", str(path))
    h = Scenario.load(path).hash
    assert code == 0
    rows = read_csv(out / h / "pde-compare.csv")
    assert rows[0] == ["n", "gap_estimate", "stderr", "epsilon_n", "epsilon_n_plus_r"]
    assert float(rows[1][3]) == pytest.approx(2 ** -0.5)
    assert run_cli(tmp_path, "simulate", "--scenario", str(path))[0] == 0
    assert read_csv(out / h / "simulate.csv")[0] == COLUMNS["simulate-pde"]


def test_pde_compare_rejects_other_kinds(tmp_path):
    path = write(tmp_path, FAST)
    code, out = run_cli(tmp_path, "pde-compare", "--scenario", str(path))
    assert code == EXIT_VALIDATION


def test_mkv_simulate(tmp_path):
    path = write(tmp_path, FAST.replace('kind = "interacting"', 'kind = "mkv"') + "[picard]\nmax_iters = 20\n")
    code, out = run_cli(tmp_path, "simulate", "--scenario", str(path))
    h = Scenario.load(path).hash
    rows = read_csv(out / h / "simulate.csv")
    assert code == 0 and rows[0] == COLUMNS["simulate-mkv"]
    # the node-0 mean follows g e^{alpha T} up to Monte Carlo error of a 4096 cloud
    assert float(rows[1][3]) == pytest.approx(math.exp(0.5), abs=0.05)


def test_transport_subcommand(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("x,y\n0,0\n1,0\n")
    b.write_text("x,y\n0,1\n1,1\n")
    code, out = run_cli(tmp_path, "transport", "--a", str(a), "--b", str(b), "--p", "2")
    rows = read_csv(out / "transport" / "transport.csv")
    assert code == 0 and rows[0] == COLUMNS["transport"]
    assert float(rows[1][2]) == pytest.approx(1.0)


def test_env_seed_override(tmp_path, monkeypatch):
    path = write(tmp_path, FAST)
    monkeypatch.setenv("CHAOSLAB_SEED", "11")
    code, out = run_cli(tmp_path, "simulate", "--scenario", str(path))
    assert code == 0
    h11 = Scenario.load(path).with_seed(11).hash
    assert (out / h11 / "simulate.csv").exists()
    code, out = run_cli(tmp_path, "simulate", "--scenario", str(path), "--seed", "12")
    assert (out / Scenario.load(path).with_seed(12).hash / "simulate.csv").exists()


def test_invalid_scenario_exit_code(tmp_path, capsys):
    path = write(tmp_path, "[rates]\np = 1.0\nq = 0.5\n")
    code, _ = run_cli(tmp_path, "simulate", "--scenario", str(path))
    assert code == EXIT_VALIDATION
    assert "p<q<k" in capsys.readouterr().err

import json
from importlib import resources

import pytest

from yamabe_lab.cli import COLUMN_META, main, read_csv, report

CONFIGS = resources.files("yamabe_lab") / "configs"


def _run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path)])


def test_unknown_command(tmp_path, capsys):
    assert _run(tmp_path, "fly") == 1
    assert "usage" in capsys.readouterr().err


def test_malformed_config_exit_2(tmp_path, capsys):
    assert _run(tmp_path, "bubble-sweep", "--config", str(CONFIGS / "malformed.cfg")) == 2
    assert "bubble.eps" in capsys.readouterr().err


def test_numerical_failure_writes_diagnostic(tmp_path):
    cfg = tmp_path / "bad.cfg"
    # two coincident bubbles show a single peak, so a two-bubble fit cannot start
    cfg.write_text("grid.n = 17\nfit.m = 2\nfit.bubbles = 0.5,0.5,0.5,0.08; 0.5,0.5,0.5,0.08\n")
    assert _run(tmp_path, "blowup-fit", "--config", str(cfg)) == 3
    diag = json.loads((tmp_path / "blowup-fit.failure.json").read_text())
    assert diag["command"] == "blowup-fit" and "peaks" in diag["error"]


def test_flow_run_artifacts(tmp_path):
    assert _run(tmp_path, "flow-run", "--config", str(CONFIGS / "flow_flat_box.cfg")) == 0
    head = (tmp_path / "flow.csv").read_text().splitlines()[0].split(",")
    for h in head:
        name = h.split(" [", 1)[0]
        assert name in COLUMN_META
        assert h.endswith("]") and ";" in h
    rows = read_csv(tmp_path / "flow.csv")
    rb = [float(r["rbar"]) for r in rows]
    assert all(b <= a + 1e-8 * abs(a) for a, b in zip(rb, rb[1:]))
    s = json.loads((tmp_path / "flow-run.summary.json").read_text())
    assert all(s["verdicts"].values())
    assert "maximum principle" in report(tmp_path)


@pytest.mark.parametrize("cmd,cfg", [("mass", "mass_schwarzschild.cfg"),
                                     ("tensor-kernel", "tensor_6_2.cfg"),
                                     ("bubble-sweep", "bubble_sweep_c.cfg")])
def test_commands_pass_their_verdicts(tmp_path, cmd, cfg):
    assert _run(tmp_path, cmd, "--config", str(CONFIGS / cfg)) == 0
    s = json.loads((tmp_path / f"{cmd}.summary.json").read_text())
    assert s["verdicts"] and all(s["verdicts"].values())


def test_bubble_sweep_gap_shrinks(tmp_path):
    assert _run(tmp_path, "bubble-sweep", "--config", str(CONFIGS / "bubble_sweep_c.cfg")) == 0
    gaps = [abs(float(r["gap"])) for r in read_csv(tmp_path / "bubble_sweep.csv")]
    assert max(gaps[1:]) < gaps[0]


def test_seeded_runs_are_bit_identical(tmp_path):
    cfg = tmp_path / "rand.cfg"
    cfg.write_text("grid.n = 9\nflow.T = 0.02\nflow.u0 = random\n")
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["flow-run", "--config", str(cfg), "--seed", "7", "--out", str(a)]) == 0
    assert main(["flow-run", "--config", str(cfg), "--seed", "7", "--out", str(b)]) == 0
    assert main(["flow-run", "--config", str(cfg), "--seed", "8", "--out", str(c)]) == 0
    assert (a / "flow.csv").read_bytes() == (b / "flow.csv").read_bytes()
    assert (a / "flow.csv").read_bytes() != (c / "flow.csv").read_bytes()


def test_report_without_artifacts(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2

import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from diffmass.cli import main
from diffmass.fixtures import (DESK_NOISE, ballistic_scenario, gradient_fixtures, push_scenario, stiff_scenario,
                               unforced_free_scenario)
from diffmass.policy import GraspMLPParams


@pytest.fixture
def ws(tmp_path):
    """Scenario files plus an output directory."""
    s = tmp_path / "scen"
    s.mkdir()
    for name, sc in (("ballistic", ballistic_scenario()), ("push", push_scenario(0.1)),
                     ("noisy", push_scenario(0.1, noise=DESK_NOISE)), ("stiff", stiff_scenario(DESK_NOISE)),
                     ("free", gradient_fixtures()[1][0]), ("unforced", unforced_free_scenario())):
        (s / f"{name}.json").write_text(sc.to_json())
    return s, tmp_path / "out"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def sha(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_simulate_ballistic_has_steps_plus_one_records(ws, capsys):
    s, out = ws
    code, _, _ = run(capsys, "simulate", s / "ballistic.json", "--out-dir", out, "--name", "b")
    assert code == 0
    lines = (out / "b.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 1001 and "frame_rate" in json.loads(lines[0])
    first = sha(out / "b.jsonl")
    assert run(capsys, "simulate", s / "ballistic.json", "--out-dir", out, "--name", "b")[0] == 0
    assert sha(out / "b.jsonl") == first
    assert (out / "b.manifest.json").exists()


def test_simulate_explicit_stiff_diverges(ws, capsys):
    s, out = ws
    code, _, err = run(capsys, "simulate", s / "stiff.json", "--integrator", "explicit", "--k-e", "1e5",
                       "--mass", "0.002", "--out-dir", out)
    assert code == 3 and "step" in err
    assert not list(out.glob("*.jsonl")) if out.exists() else True


def test_bad_input_exit_2(ws, capsys, tmp_path):
    s, out = ws
    (tmp_path / "bad.json").write_text("{")
    assert run(capsys, "simulate", tmp_path / "bad.json", "--out-dir", out)[0] == 2
    code, _, err = run(capsys, "simulate", tmp_path / "missing.json", "--out-dir", out)
    assert code == 2 and err
    assert run(capsys, "identify", s / "push.json", tmp_path / "nope.jsonl", "--out-dir", out)[0] == 2
    assert run(capsys, "bogus-command")[0] == 2


def test_gen_data_demos_count_and_trajectory_reproducible(ws, capsys):
    s, out = ws
    assert run(capsys, "gen-data", s / "push.json", "--kind", "demos", "--n", 200, "--out-dir", out,
               "--name", "d")[0] == 0
    assert len((out / "d.jsonl").read_text().splitlines()) == 200
    for name in ("t1", "t2"):
        assert run(capsys, "gen-data", s / "noisy.json", "--seed", 5, "--out-dir", out, "--name", name)[0] == 0
    assert sha(out / "t1.jsonl") == sha(out / "t2.jsonl")


def test_noise_flags_override_and_are_recorded(ws, capsys):
    s, out = ws
    run(capsys, "gen-data", s / "noisy.json", "--out-dir", out, "--name", "a")
    run(capsys, "gen-data", s / "noisy.json", "--z-bias", 0.02, "--pos-sigma", 0.0, "--out-dir", out, "--name", "b")
    ma = json.loads((out / "a.manifest.json").read_text())
    mb = json.loads((out / "b.manifest.json").read_text())
    assert ma["config"]["noise"]["z_bias"] == 0.005 and mb["config"]["noise"]["z_bias"] == 0.02
    assert mb["config"]["noise"]["pos_sigma"] == 0.0
    assert mb["args"]["z_bias"] == 0.02


def test_identify_noiseless_and_json(ws, capsys):
    s, out = ws
    code, stdout, _ = run(capsys, "identify", s / "push.json", "--json", "--out-dir", out, "--name", "i")
    assert code == 0
    payload = json.loads(stdout.strip().splitlines()[-1])
    assert abs(payload["m_hat"] - 0.1) <= 1e-3
    rows = list(csv.reader(io.StringIO((out / "i_curve.csv").read_text())))
    assert rows[0][:3] == ["epoch", "m", "loss"]
    rep = json.loads((out / "i_report.json").read_text())
    assert rep["m_hat"] == payload["m_hat"]


def test_identify_small_init_overshoots_then_recovers(ws, capsys):
    s, out = ws
    run(capsys, "identify", s / "push.json", "--m-init", 0.002, "--out-dir", out, "--name", "o")
    rep = json.loads((out / "o_report.json").read_text())
    m = rep["m_curve"]
    assert max(m) > 0.1 and abs(rep["m_hat"] - 0.1) <= 1e-3


def test_identify_from_real_file(ws, capsys):
    s, out = ws
    run(capsys, "gen-data", s / "noisy.json", "--out-dir", out, "--name", "real")
    code, stdout, _ = run(capsys, "identify", s / "noisy.json", out / "real.jsonl", "--json", "--out-dir", out)
    assert code == 0 and abs(json.loads(stdout.splitlines()[-1])["m_hat"] - 0.1) <= 0.012


def test_identify_unobservable_exit_4(ws, capsys):
    s, out = ws
    code, _, err = run(capsys, "identify", s / "unforced.json", "--out-dir", out)
    assert code == 4 and "mass unobservable" in err


def test_identify_multi_seed(ws, capsys):
    s, out = ws
    code, stdout, _ = run(capsys, "identify", s / "noisy.json", "--seeds", 3, "--jobs", 2, "--json",
                          "--out-dir", out, "--name", "ms")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "ms_seeds.csv").read_text())))
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]
    assert json.loads(stdout.splitlines()[-1])["median_rel_err"] <= 0.12


def test_ablate_stiff(ws, capsys):
    s, out = ws
    code, _, _ = run(capsys, "ablate", s / "stiff.json", "--seed", 1, "--out-dir", out, "--name", "ab")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "ab.csv").read_text())))
    assert [r["integrator"] for r in rows] == ["semi", "explicit"]
    semi, expl = rows
    assert float(semi["abs_err"]) < (float(expl["abs_err"]) if expl["m_hat"] not in ("", "diverged") else 1e9)
    assert float(semi["sec_per_iter"]) > 0


def test_ablate_records_explicit_divergence(ws, capsys, tmp_path):
    s, out = ws
    sc = stiff_scenario().with_(k_e=1.0e5, m_init=0.01, ref_substeps=1)
    (tmp_path / "hard.json").write_text(sc.to_json())
    code, stdout, _ = run(capsys, "ablate", tmp_path / "hard.json", "--max-epochs", 3, "--json", "--out-dir", out,
                          "--name", "hd")
    assert code == 0 and json.loads(stdout.splitlines()[-1])["explicit_divergences"] >= 1
    assert "diverged" in (out / "hd.csv").read_text()


def test_gradcheck_pass_fail_and_json(ws, capsys):
    s, out = ws
    code, stdout, _ = run(capsys, "gradcheck", s / "free.json", "--mass", 0.08, "--json", "--out-dir", out)
    p = json.loads(stdout.splitlines()[-1])
    assert code == 0 and p["rel_err"] <= 1e-6 and p["pass"]
    assert json.loads(json.dumps(p)) == p
    code, _, _ = run(capsys, "gradcheck", s / "free.json", "--mass", 0.08, "--threshold", 1e-12, "--out-dir", out)
    assert code == 1


@pytest.fixture
def demos(ws, capsys):
    s, out = ws
    run(capsys, "gen-data", s / "push.json", "--kind", "demos", "--n", 1, "--masses", "0.2", "--out-dir", out,
        "--name", "one")
    run(capsys, "gen-data", s / "push.json", "--kind", "demos", "--n", 12, "--masses", "0.03,0.2,1.2",
        "--out-dir", out, "--name", "three")
    return out


def _sections(path: Path):
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return rows, {r["phase"] for r in rows}


def test_train_policy_phase1_overfits_one_demo(demos, capsys):
    out = demos
    code, _, _ = run(capsys, "train-policy", out / "one.jsonl", "--phase", 1, "--epochs-phase1", 300,
                     "--out-dir", out, "--name", "p1")
    assert code == 0
    rows, phases = _sections(out / "p1_loss.csv")
    assert phases == {"1"} and float(rows[-1]["action"]) <= 1e-4
    assert GraspMLPParams.from_bytes((out / "p1.params").read_bytes()).bands == 4


def test_train_policy_both_phases_and_hash(demos, capsys):
    out = demos
    for name in ("pa", "pb"):
        assert run(capsys, "train-policy", out / "three.jsonl", "--epochs-phase1", 10, "--epochs-phase2", 10,
                   "--seed", 3, "--out-dir", out, "--name", name)[0] == 0
    _, phases = _sections(out / "pa_loss.csv")
    assert phases == {"1", "2"}
    assert sha(out / "pa.params") == sha(out / "pb.params")


def test_train_policy_empty_dataset_exit_2(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert run(capsys, "train-policy", tmp_path / "empty.jsonl", "--out-dir", tmp_path)[0] == 2


def test_eval_policy_oracle_and_matrix(demos, capsys):
    out = demos
    code, stdout, _ = run(capsys, "eval-policy", "--oracle", "--masses", "0.03,0.2,1.2", "--trials", 5,
                          "--condition", "eval", "--out-dir", out, "--name", "or")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "or.csv").read_text())))
    assert len(rows) == 9 and all(float(r["rate"]) == 1.0 for r in rows)
    for m in ("0.03", "0.2", "1.2"):
        run(capsys, "gen-data", out.parent / "scen" / "push.json", "--kind", "demos", "--n", 4, "--masses", m, "--out-dir", out, "--name", f"d_{m}")
        run(capsys, "train-policy", out / f"d_{m}.jsonl", "--epochs-phase1", 5, "--epochs-phase2", 5,
            "--out-dir", out, "--name", f"pol_{m}")
    code, stdout, _ = run(capsys, "eval-policy", str(out / "pol_*.params"), "--masses", "0.03,0.2,1.2",
                          "--trials", 3, "--out-dir", out, "--name", "mx")
    assert code == 0 and len((out / "mx.csv").read_text().splitlines()) == 1 + 9
    assert stdout.count("diagonal-dominant") == 3


def test_eval_policy_no_params_is_input_error(tmp_path, capsys):
    assert run(capsys, "eval-policy", str(tmp_path / "none_*.params"), "--out-dir", tmp_path)[0] == 2


def test_out_dir_from_environment(ws, capsys, monkeypatch, tmp_path):
    s, _ = ws
    target = tmp_path / "envout"
    monkeypatch.setenv("DIFFMASS_OUT_DIR", str(target))
    import importlib
    import diffmass.cli as cli
    importlib.reload(cli)
    try:
        assert cli.main(["simulate", str(s / "push.json"), "--name", "e"]) == 0
    finally:
        monkeypatch.delenv("DIFFMASS_OUT_DIR")
        importlib.reload(cli)
    assert (target / "e.jsonl").exists()


def test_manifest_contents_and_rerun(ws, capsys, tmp_path):
    s, out = ws
    run(capsys, "identify", s / "noisy.json", "--seed", 2, "--out-dir", out, "--name", "r")
    man = json.loads((out / "r.manifest.json").read_text())
    for key in ("command", "args", "config", "seeds", "version", "wall_clock", "outputs"):
        assert key in man
    assert man["command"] == "identify" and man["seeds"]["noise"] == [2]
    names = set(man["outputs"])
    assert {"r_report.json", "r_curve.csv"} <= names
    code, stdout, _ = run(capsys, "rerun", out / "r.manifest.json", "--json", "--target", tmp_path / "again")
    assert code == 0 and json.loads(stdout.splitlines()[-1])["identical"]


def test_rerun_detects_tampering(ws, capsys, tmp_path):
    s, out = ws
    run(capsys, "simulate", s / "push.json", "--out-dir", out, "--name", "t")
    man_path = out / "t.manifest.json"
    man = json.loads(man_path.read_text())
    name = next(iter(man["outputs"]))
    man["outputs"][name]["sha256"] = "0" * 64
    man_path.write_text(json.dumps(man))
    assert run(capsys, "rerun", man_path, "--target", tmp_path / "t2")[0] == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "diffmass.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout

import json
from pathlib import Path

import numpy as np
import pytest

from diffmass.fixtures import gradient_fixtures, push_scenario, stiff_scenario
from diffmass.geomcore import box_mesh, dump_mesh
from diffmass.scenario import NoiseModel, ScenarioError, load_scenario, scenario_from_dict

SCENARIOS = sorted((Path(__file__).resolve().parent.parent / "scenarios").glob("*.json"))


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_load_and_round_trip(path):
    sc = load_scenario(path)
    again = scenario_from_dict(json.loads(sc.to_json()))
    assert again.to_json() == sc.to_json()


def test_shipped_scenarios_exist():
    assert len(SCENARIOS) >= 10


@pytest.mark.parametrize("sc", [push_scenario(0.2, noise=NoiseModel(0.002, 0.005, 0.0, 7)), stiff_scenario(),
                                gradient_fixtures()[1][0]], ids=["push", "stiff", "spin"])
def test_round_trip_preserves_simulation(sc):
    back = scenario_from_dict(json.loads(sc.to_json()))
    a, _ = sc.simulate()
    b, _ = back.simulate()
    assert np.array_equal(a.positions, b.positions)


def test_mesh_path_relative_to_file(tmp_path):
    (tmp_path / "cube.obj").write_text(dump_mesh(box_mesh()))
    d = json.loads(push_scenario(0.1).to_json())
    d["mesh"] = "cube.obj"
    (tmp_path / "s.json").write_text(json.dumps(d))
    assert len(load_scenario(tmp_path / "s.json").mesh.vertices) == 8


@pytest.mark.parametrize("patch", [{"bogus": 1}, {"true_mass_kg": -1}, {"dt": 0}, {"mesh": "missing.obj"},
                                   {"schedule": [{"t0": 1, "t1": 0, "force": [0, 0, 0]}]},
                                   {"noise": {"pos_sigma": -1}}, {"n_contact": 99}, {"gravity": [0, 0]}])
def test_bad_scenarios(tmp_path, patch):
    d = json.loads(push_scenario(0.1).to_json())
    d.update(patch)
    with pytest.raises(ScenarioError):
        scenario_from_dict(d, tmp_path)


def test_missing_key_and_bad_json(tmp_path):
    with pytest.raises(ScenarioError, match="mesh"):
        scenario_from_dict({"true_mass_kg": 0.1})
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(ScenarioError, match="line 1"):
        load_scenario(tmp_path / "x.json")

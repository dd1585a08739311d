import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbicycle.cli import (
    TRAJECTORY_HEADER,
    ParseError,
    emit_report,
    emit_trajectory_csv,
    main,
    parse_config,
    run,
    write_manifest,
)
from dynbicycle.integrate import StepConfig, Trajectory, rollout
from dynbicycle.models import TABLE_I, ControlInput, DynState, KinState, ValidationError
from dynbicycle.scenarios import GROUND_TRUTH_CAVEAT, run_speed_sweep
from dynbicycle.stability import condition_sweep


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_empty_config_gives_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, ""), scenario="step-steer")
    assert cfg.vehicle == TABLE_I
    assert cfg.step.T_s == 0.1 and cfg.mpc.T_s == 0.1
    assert cfg.spec.T_s_list == (0.01, 0.05, 0.1)


def test_invalid_mass_is_rejected(tmp_path):
    with pytest.raises(ValidationError, match="m > 0"):
        parse_config(_write(tmp_path, "[vehicle]\nm = -1\n"), scenario="step-steer")


def test_sample_time_override_propagates():
    cfg = parse_config(scenario="stop-and-go", overrides={"step.T_s": "0.05"})
    assert cfg.step.T_s == 0.05 and cfg.mpc.T_s == 0.05 and cfg.spec.T_s == 0.05
    cfg = parse_config(scenario="step-steer", overrides={"step.T_s": "0.05"})
    assert cfg.spec.T_s_list == (0.05,)


def test_scenario_name_from_file(tmp_path):
    cfg = parse_config(_write(tmp_path, "[scenario]\nname = condition-sweep\nu_max = 10\n"))
    assert cfg.scenario == "condition-sweep" and cfg.spec.u_max == 10.0


@pytest.mark.parametrize("text, line, fragment", [
    ("[vehicle]\nm = 1400\nmass = 3\n", 3, "unknown key 'mass'"),
    ("[vehicle]\n\nl_f = abc\n", 3, "not a valid"),
    ("m = 1400\n", 1, "outside of any [section]"),
    ("[mpc]\nN_p = 10\nN_p = 12\n", 3, "duplicate key"),
    ("[scenario]\nname = drift\n", 2, "unknown scenario"),
])
def test_parse_errors_carry_line_numbers(tmp_path, text, line, fragment):
    path = _write(tmp_path, text)
    with pytest.raises(ParseError) as info:
        parse_config(path, scenario=None if "name" in text else "step-steer")
    assert f"{path}:{line}:" in str(info.value)
    assert fragment in str(info.value)


def test_unknown_section(tmp_path):
    with pytest.raises(ParseError, match=r"unknown section \[tires\]"):
        parse_config(_write(tmp_path, "[tires]\nmu = 1\n"), scenario="step-steer")


def test_scenario_keys_are_scenario_specific():
    with pytest.raises(ParseError, match="for scenario 'condition-sweep'"):
        parse_config(scenario="condition-sweep", overrides={"scenario.u0": "5"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ParseError, match="not found"):
        parse_config(tmp_path / "nope.ini", scenario="timing")


def test_manifest_round_trip(tmp_path):
    cfg = parse_config(scenario="timing", overrides={"mpc.N_p": "15", "scenario.obstacle_moved": "none",
                                                     "vehicle.k_f": "-120000"}, seed=4)
    path = write_manifest(cfg, tmp_path / "manifest.ini")
    again = parse_config(path)
    assert again.scenario == "timing" and again.seed == 4
    assert again.vehicle == cfg.vehicle and again.step == cfg.step
    assert again.spec.loop.obstacle_moved is None and again.spec.loop.mpc.N_p == 15
    assert write_manifest(again, tmp_path / "again.ini").read_text() == path.read_text()


def test_single_sample_csv(tmp_path):
    traj = Trajectory([0.0], [DynState(u=8.0).as_array()], [[0.0, 0.1]])
    rows = _rows(emit_trajectory_csv(traj, tmp_path / "one.csv"))
    assert rows[0] == list(TRAJECTORY_HEADER)
    assert len(rows) == 2


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(finite, min_size=6, max_size=6), min_size=1, max_size=5), finite, finite)
def test_csv_round_trip_is_bit_exact(tmp_path_factory, states, a, d):
    n = len(states)
    traj = Trajectory(0.1 * np.arange(n), np.array(states), np.tile([a, d], (n, 1)))
    path = emit_trajectory_csv(traj, tmp_path_factory.mktemp("csv") / "t.csv")
    back = np.array([[float(c) for c in r] for r in _rows(path)[1:]])
    assert np.array_equal(back[:, 1:7], traj.states)
    assert np.array_equal(back[:, 0], traj.t)
    assert np.array_equal(back[:, 7:], traj.inputs)


def test_step_steer_csv_has_one_row_per_sample(tmp_path):
    traj = rollout(TABLE_I, DynState(u=8.0), [ControlInput(0.0, 0.2674)] * 40, StepConfig(0.1))
    rows = _rows(emit_trajectory_csv(traj, tmp_path / "bv.csv"))
    assert len(rows) == 42
    assert float(rows[-1][0]) == pytest.approx(4.0)


def test_kinematic_csv_writes_nan_for_lateral_states(tmp_path):
    traj = rollout(TABLE_I, KinState(u=5.0), [ControlInput(0.0, 0.1)] * 3, StepConfig(0.1, "forward-euler"))
    rows = _rows(emit_trajectory_csv(traj, tmp_path / "kin.csv"))
    assert all(r[5] == "nan" and r[6] == "nan" for r in rows[1:])
    assert float(rows[2][4]) == 5.0


def test_empty_sweep_report_has_header_only(tmp_path):
    rep = condition_sweep(TABLE_I, (0.0, 15.0), 0.1, 2)
    rep.u, rep.norms = rep.u[:0], rep.norms[:0]
    txt, twin = emit_report(rep, tmp_path / "empty.txt")
    assert _rows(twin) == [["u", "T_s", "norm"]]
    assert txt.exists()


def test_speed_table_report(tmp_path):
    rep = run_speed_sweep(speeds=(8,))
    txt, twin = emit_report(rep, tmp_path / "table2.txt")
    rows = _rows(twin)
    assert rows[0] == ["u0", "dynamic_rms", "kinematic_rms", "improvement_pct"]
    assert float(rows[1][3]) == pytest.approx(100 * rep.speed_rows[0].improvement)
    assert GROUND_TRUTH_CAVEAT in txt.read_text()


def test_event_list_report(tmp_path):
    _, twin = emit_report([("stopped", 6.0), ("arrived", 14.2)], tmp_path / "ev.txt")
    assert _rows(twin)[1:] == [["stopped", "6.0"], ["arrived", "14.2"]]
    with pytest.raises(TypeError):
        emit_report(object(), tmp_path / "x.txt")


def test_run_condition_sweep_writes_artifacts(tmp_path):
    cfg = parse_config(scenario="condition-sweep", overrides={"scenario.grid_points": "11"}, out=tmp_path)
    names = sorted(p.name for p in run(cfg))
    assert names == ["condition_sweep.csv", "condition_sweep.txt", "manifest.ini"]
    assert len(_rows(tmp_path / "condition_sweep.csv")) == 12


def test_exit_code_success(tmp_path, capsys):
    assert main(["condition-sweep", "--out", str(tmp_path), "--set", "scenario.grid_points=5"]) == 0
    assert "manifest.ini" in capsys.readouterr().out


def test_exit_code_step_steer_prints_caveat(tmp_path, capsys):
    code = main(["step-steer", "--out", str(tmp_path), "--ts", "0.1", "--set", "scenario.duration=0.5"])
    assert code == 0
    assert GROUND_TRUTH_CAVEAT in capsys.readouterr().out
    assert (tmp_path / "traj_backward-variant_Ts0p1.csv").exists()


@pytest.mark.parametrize("argv", [
    ["step-steer", "--set", "vehicle.m=-1"],
    ["step-steer", "--set", "nokey"],
    ["warp-drive"],
    ["timing", "--set", "scenario.repeats=0"],
])
def test_exit_code_usage_errors(tmp_path, argv, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_exit_code_runtime_failure_keeps_partial_output(tmp_path, capsys):
    code = main(["stop-and-go", "--out", str(tmp_path), "--set", "scenario.timeout=0.3",
                 "--set", "scenario.obstacle_initial=none"])
    assert code == 2
    assert "not reached" in capsys.readouterr().err
    assert len(_rows(tmp_path / "trajectory.csv")) == 5

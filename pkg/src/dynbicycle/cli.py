"""Command-line harness: config ingestion, scenario dispatch and CSV/report output.

Config files are INI text with the sections ``[vehicle]``, ``[step]``,
``[mpc]``, ``[scenario]`` and ``[run]``; keys are the field names of the
corresponding types. Anything left out falls back to the Table I vehicle and
the library defaults. Every run writes ``manifest.ini`` holding the resolved
config, which can be fed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .integrate import StepConfig, Trajectory
from .models import DomainError, ValidationError, VehicleParams
from .mpc import MpcConfig
from .scenarios import (
    GROUND_TRUTH_CAVEAT,
    ComparisonReport,
    OpenLoopSpec,
    ScenarioTimeout,
    StopAndGoResult,
    StopAndGoSpec,
    TimingStats,
    run_condition_figure,
    run_speed_sweep,
    run_step_steer,
    run_stop_and_go,
    run_timing_benchmark,
)
from .stability import SweepReport

SCENARIOS = ("step-steer", "condition-sweep", "stop-and-go", "timing", "table2-sweep")
TRAJECTORY_HEADER = ("t", "x", "y", "phi", "u", "v", "omega", "a", "delta")


class ParseError(ValueError):
    """Malformed config text; the message carries file, line and field."""


# ---------------------------------------------------------------------------
# config schema


@dataclass(frozen=True)
class Table2Spec:
    speeds: tuple = tuple(float(s) for s in range(1, 11))
    delta_step: float = 0.2674
    duration: float = 4.0
    reference: str = "full"


@dataclass(frozen=True)
class ConditionSpec:
    u_max: float = 15.0
    grid_points: int = 1000


@dataclass(frozen=True)
class TimingSpec:
    loop: StopAndGoSpec = StopAndGoSpec()
    repeats: int = 1


_FLOAT, _INT, _STR, _FLOATS, _STRS, _POINT = "float", "int", "str", "floats", "strs", "point"

_VEHICLE_KEYS = {f.name: _FLOAT for f in fields(VehicleParams)}
_STEP_KEYS = {"T_s": _FLOAT, "rk4_substep": _FLOAT}
_MPC_KEYS = {
    "N_p": _INT, "N_c": _INT, "Q": _FLOATS, "R": _FLOATS, "Q_s": _FLOATS, "D_s": _FLOAT,
    "X_min": _FLOATS, "X_max": _FLOATS, "U_min": _FLOATS, "U_max": _FLOATS,
    "penalty": _FLOAT, "grid": _INT, "n_seeds": _INT, "n_polish": _INT,
    "feas_tol": _FLOAT, "tol": _FLOAT, "max_iter": _INT,
}
_LOOP_KEYS = {
    "start": _FLOATS, "target": _FLOATS, "v_ref": _FLOAT, "obstacle_initial": _POINT,
    "obstacle_moved": _POINT, "predictor": _STR, "initial_speed": _FLOAT, "timeout": _FLOAT,
    "stop_speed": _FLOAT, "stop_steps": _INT, "arrive_radius": _FLOAT,
}
_SCENARIO_KEYS = {
    "step-steer": {"u0": _FLOAT, "delta_step": _FLOAT, "duration": _FLOAT, "T_s_list": _FLOATS,
                   "methods": _STRS, "reference": _STR},
    "table2-sweep": {"speeds": _FLOATS, "delta_step": _FLOAT, "duration": _FLOAT, "reference": _STR},
    "condition-sweep": {"u_max": _FLOAT, "grid_points": _INT},
    "stop-and-go": dict(_LOOP_KEYS),
    "timing": {**_LOOP_KEYS, "repeats": _INT},
}
_RUN_KEYS = {"seed": _INT}


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    vehicle: VehicleParams = VehicleParams()
    step: StepConfig = StepConfig()
    mpc: MpcConfig = MpcConfig()
    spec: object = None
    out: Path = Path("out")
    seed: int | None = None
    sources: dict = field(default_factory=dict, compare=False)


def _convert(kind, raw: str):
    text = raw.strip()
    if kind == _FLOAT:
        return float(text)
    if kind == _INT:
        return int(text)
    if kind == _STR:
        return text
    if kind == _POINT and text.lower() in ("none", ""):
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if kind == _STRS:
        return tuple(parts)
    return tuple(float(p) for p in parts)


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` for diagnostics."""
    lines = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section is not None:
            for sep in ("=", ":"):
                if sep in s:
                    lines[(section, s.split(sep, 1)[0].strip())] = no
                    break
    return lines


def _read_ini(path: Path) -> tuple[dict, dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{path}: config file not found") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (I_z, N_p)
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"{path}:{exc.lineno}: key outside of any [section]: {exc.line.strip()!r}") from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"{path}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"{path}:{exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ParseError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return values, _key_lines(text)


def parse_config(path=None, *, scenario: str | None = None, overrides: dict | None = None,
                 out=None, seed: int | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from an optional file plus overrides.

    ``overrides`` maps ``"section.key"`` to a string value and wins over the
    file; ``scenario`` wins over ``[scenario] name``. Raises
    :class:`ParseError` for malformed text or unknown keys and
    :class:`ValidationError` for values that break a parameter invariant.
    """
    raw, lines = ({}, {}) if path is None else _read_ini(Path(path))
    where = str(path) if path is not None else "<flags>"
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        raw.setdefault(section, {})[key] = str(value)
        lines[(section, key)] = None

    def locate(section, key):
        no = lines.get((section, key))
        return f"{where}:{no}" if no else where

    scenario_raw = dict(raw.get("scenario", {}))
    name = scenario or scenario_raw.pop("name", None)
    scenario_raw.pop("name", None)
    if name is None:
        raise ParseError(f"{where}: no scenario given (subcommand or [scenario] name)")
    if name not in SCENARIOS:
        raise ParseError(f"{locate('scenario', 'name')}: unknown scenario {name!r}; expected one of {SCENARIOS}")

    schema = {"vehicle": _VEHICLE_KEYS, "step": _STEP_KEYS, "mpc": _MPC_KEYS,
              "scenario": _SCENARIO_KEYS[name], "run": _RUN_KEYS}
    parsed = {}
    for section, items in raw.items():
        if section not in schema:
            raise ParseError(f"{where}: unknown section [{section}]")
        keys = schema[section]
        out_section = parsed.setdefault(section, {})
        for key, value in items.items():
            if section == "scenario" and key == "name":
                continue
            if key not in keys:
                raise ParseError(f"{locate(section, key)}: unknown key {key!r} in [{section}]"
                                 + (f" for scenario {name!r}" if section == "scenario" else ""))
            try:
                out_section[key] = _convert(keys[key], value)
            except ValueError:
                raise ParseError(f"{locate(section, key)}: [{section}] {key} = {value!r} "
                                 f"is not a valid {keys[key]}") from None

    vehicle = VehicleParams(**parsed.get("vehicle", {}))
    step_kw = parsed.get("step", {})
    step = StepConfig(**step_kw)
    mpc = MpcConfig(**{k: (list(v) if isinstance(v, tuple) else v) for k, v in parsed.get("mpc", {}).items()},
                    T_s=step.T_s)
    sc = parsed.get("scenario", {})
    spec = _build_spec(name, sc, step, mpc, "T_s" in step_kw)
    run = parsed.get("run", {})
    return RunConfig(
        scenario=name,
        vehicle=vehicle,
        step=step,
        mpc=mpc,
        spec=spec,
        out=Path(out) if out is not None else Path("out"),
        seed=seed if seed is not None else run.get("seed"),
        sources={"config": str(path) if path is not None else None, "overrides": dict(overrides or {})},
    )


def _build_spec(name, sc, step: StepConfig, mpc: MpcConfig, ts_given: bool):
    if name == "step-steer":
        if "T_s_list" not in sc and ts_given:
            sc = {**sc, "T_s_list": (step.T_s,)}
        return OpenLoopSpec(**sc, rk4_substep=step.rk4_substep)
    if name == "table2-sweep":
        return Table2Spec(**sc)
    if name == "condition-sweep":
        spec = ConditionSpec(**sc)
        if spec.u_max < 0 or spec.grid_points < 2:
            raise ValidationError("u_max >= 0 and grid_points >= 2")
        return spec
    repeats = sc.pop("repeats", 1) if name == "timing" else None
    loop = StopAndGoSpec(**sc, D_s=mpc.D_s, mpc=mpc)
    if name == "timing":
        if repeats < 1:
            raise ValidationError("repeats >= 1")
        return TimingSpec(loop, repeats)
    return loop


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list, np.ndarray)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_manifest(cfg: RunConfig, path) -> Path:
    """The fully resolved config as INI text that :func:`parse_config` accepts."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["vehicle"] = {k: _fmt(v) for k, v in asdict(cfg.vehicle).items()}
    parser["step"] = {k: _fmt(getattr(cfg.step, k)) for k in _STEP_KEYS}
    parser["mpc"] = {k: _fmt(getattr(cfg.mpc, k)) for k in _MPC_KEYS}
    scenario = {"name": cfg.scenario}
    spec = cfg.spec
    if isinstance(spec, TimingSpec):
        scenario.update({k: _fmt(getattr(spec.loop, k)) for k in _LOOP_KEYS})
        scenario["repeats"] = _fmt(spec.repeats)
    else:
        scenario.update({k: _fmt(getattr(spec, k)) for k in _SCENARIO_KEYS[cfg.scenario]})
    parser["scenario"] = scenario
    if cfg.seed is not None:
        parser["run"] = {"seed": str(cfg.seed)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# resolved configuration, dynbicycle {__version__}\n")
        parser.write(fh)
    return path


# ---------------------------------------------------------------------------
# emitters


def emit_trajectory_csv(traj: Trajectory, path) -> Path:
    """One row per sample with header ``t,x,y,phi,u,v,omega,a,delta``.

    Values use shortest round-trip formatting, so parsing the file gives the
    same doubles back. Kinematic rows have no lateral states and write
    ``nan`` for ``v`` and ``omega``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for i in range(len(traj)):
            t = traj.t[i]
            s = traj.states[i]
            a, d = traj.inputs[i]
            if traj.kind == "dyn":
                x, y, phi, u, v, om = s
            else:
                x, y, u, phi = s
                v = om = math.nan
            w.writerow([repr(float(c)) for c in (t, x, y, phi, u, v, om, a, d)])
    return path


def _table(header, rows) -> str:
    cells = [list(header)] + [[c if isinstance(c, str) else f"{c:.6g}" for c in r] for r in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    out = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    out.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(out) + "\n"


def _report_rows(report):
    """``(title, header, rows, notes)`` for each supported report type."""
    if isinstance(report, ComparisonReport):
        if report.method_rows:
            header = ("T_s", "method", "divergent", "bounded", "terminal_v", "terminal_omega", "rms_vs_reference")
            rows = [(r.T_s, r.method, str(r.divergent), str(r.bounded), r.terminal_v, r.terminal_omega,
                     r.rms_vs_reference) for r in report.method_rows]
            return "Step steer", header, rows, [report.caveat]
        header = ("u0", "dynamic_rms", "kinematic_rms", "improvement_pct")
        rows = [(r.u0, r.dynamic_rms, r.kinematic_rms, 100.0 * r.improvement) for r in report.speed_rows]
        return "Location RMS error by initial speed", header, rows, [report.caveat]
    if isinstance(report, SweepReport):
        rows = [(float(u), report.T_s, float(n)) for u, n in zip(report.u, report.norms)]
        notes = []
        if len(report.u):
            notes.append(f"max ||A_hat||_2 = {report.max_norm:.9g} at u = {report.argmax_u:.6g} "
                         f"(condition {'holds' if report.condition_holds else 'violated'})")
        return "Spectral norm of A_hat over speed", ("u", "T_s", "norm"), rows, notes
    if isinstance(report, StopAndGoResult):
        rows = [(name, t) for name, t in report.events]
        notes = [f"arrived: {report.arrived}", f"infeasible steps: {report.infeasible_steps}",
                 f"mean solve time: {np.mean(report.solve_times) if len(report.solve_times) else math.nan:.6g} s"]
        return "Closed-loop events", ("event", "t"), rows, notes
    if isinstance(report, dict) and all(isinstance(v, TimingStats) for v in report.values()):
        rows = [(k, v.mean, v.median, v.p95, str(v.n)) for k, v in report.items()]
        notes = []
        if "dyn" in report and "kin" in report and report["kin"].mean > 0:
            notes.append(f"dyn/kin mean ratio: {report['dyn'].mean / report['kin'].mean:.4g}")
        return "Per-step solve time [s]", ("predictor", "mean", "median", "p95", "n"), rows, notes
    if isinstance(report, (list, tuple)):
        return "Events", ("event", "t"), [(str(n), float(t)) for n, t in report], []
    raise TypeError(f"cannot emit a report for {type(report).__name__}")


def emit_report(report, path) -> tuple[Path, Path]:
    """Write a readable table to ``path`` and a CSV twin next to it.

    Accepts a :class:`ComparisonReport` (step steer, or the per-speed table),
    a :class:`SweepReport`, a :class:`StopAndGoResult` or a plain list of
    ``(event, t)`` pairs, and the timing dict. Returns both paths.
    """
    title, header, rows, notes = _report_rows(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    twin = path.with_suffix(".csv")
    with twin.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else repr(float(c)) for c in r])
    body = [title, "=" * len(title), "", _table(header, rows)]
    body += [n + "\n" for n in notes]
    path.write_text("\n".join(body), encoding="utf-8")
    return path, twin


# ---------------------------------------------------------------------------
# dispatch


def _slug(x: float) -> str:
    return f"{x:g}".replace(".", "p")


def run(cfg: RunConfig) -> list[Path]:
    """Execute the configured scenario and write every artefact under ``cfg.out``."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    written = [write_manifest(cfg, out / "manifest.ini")]
    p = cfg.vehicle
    if cfg.scenario == "step-steer":
        rep = run_step_steer(cfg.spec, p)
        written += emit_report(rep, out / "step_steer.txt")
        for (method, T_s), traj in rep.traces.items():
            written.append(emit_trajectory_csv(traj, out / f"traj_{method}_Ts{_slug(T_s)}.csv"))
    elif cfg.scenario == "table2-sweep":
        s = cfg.spec
        rep = run_speed_sweep(s.speeds, s.delta_step, s.duration, cfg.step.T_s, p, s.reference)
        written += emit_report(rep, out / "table2.txt")
    elif cfg.scenario == "condition-sweep":
        rep, _ = run_condition_figure(p, cfg.step.T_s, cfg.spec.u_max, cfg.spec.grid_points)
        written += emit_report(rep, out / "condition_sweep.txt")
    elif cfg.scenario == "stop-and-go":
        try:
            res = run_stop_and_go(cfg.spec, p)
        except ScenarioTimeout as exc:
            # keep the partial run for inspection, then report the failure
            if exc.result is not None:
                _emit_loop(exc.result, out)
            raise
        written += _emit_loop(res, out)
    elif cfg.scenario == "timing":
        stats = run_timing_benchmark(cfg.spec.loop, p, cfg.spec.repeats)
        written += emit_report(stats, out / "timing.txt")
    return written


def _emit_loop(res: StopAndGoResult, out: Path) -> list[Path]:
    written = [emit_trajectory_csv(res.trajectory, out / "trajectory.csv")]
    written += emit_report(res, out / "events.txt")
    obs = out / "obstacle.csv"
    with obs.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "x_obs", "y_obs"))
        for t, (xo, yo) in zip(res.trajectory.t, res.obstacle_track):
            w.writerow([repr(float(t)), repr(float(xo)), repr(float(yo))])
    return written + [obs]


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--out", type=Path, help="output directory (default: out/<scenario>)")
    common.add_argument("--ts", type=float, help="sample time T_s in seconds, overrides [step] T_s")
    common.add_argument("--seed", type=int, help="seed recorded in the manifest")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a single config value (repeatable)")
    parser = _ArgumentParser(prog="dynbicycle", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="scenario", required=True, parser_class=_ArgumentParser)
    helps = {
        "step-steer": "open-loop step steer at several sample times",
        "condition-sweep": "spectral norm of A_hat over speed",
        "stop-and-go": "closed-loop MPC with a relocating obstacle",
        "timing": "per-step solve time, dynamic vs kinematic predictor",
        "table2-sweep": "location RMS error by initial speed",
    }
    for name in SCENARIOS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep or "." not in key:
                raise ValidationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        if args.ts is not None:
            overrides["step.T_s"] = repr(args.ts)
        out = args.out if args.out is not None else Path("out") / args.scenario
        cfg = parse_config(args.config, scenario=args.scenario, overrides=overrides, out=out, seed=args.seed)
    except (ParseError, ValidationError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        written = run(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DomainError, ScenarioTimeout, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    if cfg.scenario in ("step-steer", "table2-sweep"):
        print(GROUND_TRUTH_CAVEAT)
    return 0


if __name__ == "__main__":
    sys.exit(main())

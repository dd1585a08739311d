"""Experiment runners: open-loop step steer, speed sweep, stability sweep,
closed-loop stop-and-go and solver timing.

Ground truth for every open-loop comparison is the RK4-integrated continuous
dynamic model with linear tires (a stand-in for a full-vehicle simulator).
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import integrate as itg
from .integrate import StepConfig, Trajectory
from .models import TABLE_I, ControlInput, DomainError, DynState, KinState, ValidationError, VehicleParams
from .mpc import (
    DynamicPredictor,
    InfeasibleWarning,
    KinematicPredictor,
    MpcConfig,
    build_reference_window,
    solve_step,
)
from .stability import SweepReport, condition_sweep

GROUND_TRUTH_CAVEAT = (
    "ground truth: RK4 (0.001 s) integration of the continuous dynamic model with "
    "linear tires; absolute errors are not comparable to full-vehicle simulator data"
)

OPEN_LOOP_METHODS = ("backward-variant", "forward-euler", "kinematic")


class LengthMismatch(ValueError):
    pass


class ScenarioTimeout(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def rms_location_error(test: Trajectory, truth: Trajectory) -> float:
    """Root-mean-square planar distance between matching samples."""
    if len(test) != len(truth):
        raise LengthMismatch(f"{len(test)} samples vs {len(truth)}")
    if not np.allclose(test.t, truth.t, rtol=0, atol=1e-9):
        raise LengthMismatch("trajectories are sampled on different time grids")
    d2 = (test.x - truth.x) ** 2 + (test.y - truth.y) ** 2
    return float(np.sqrt(np.mean(d2)))


# ---------------------------------------------------------------------------
# open loop


@dataclass(frozen=True)
class OpenLoopSpec:
    u0: float = 8.0
    delta_step: float = 0.2674
    duration: float = 4.0
    T_s_list: tuple = (0.01, 0.05, 0.1)
    methods: tuple = OPEN_LOOP_METHODS
    reference: str = "full"
    rk4_substep: float = 0.001

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError("duration > 0")
        if not self.u0 > 0:
            raise ValidationError("u0 > 0")
        if not all(ts > 0 for ts in self.T_s_list):
            raise ValidationError("T_s values must be positive")
        unknown = set(self.methods) - set(OPEN_LOOP_METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}")


@dataclass
class MethodRow:
    T_s: float
    method: str
    divergent: bool
    bounded: bool
    terminal_v: float
    terminal_omega: float
    rms_vs_reference: float


@dataclass
class SpeedRow:
    u0: float
    dynamic_rms: float
    kinematic_rms: float

    @property
    def improvement(self) -> float:
        return 1.0 - self.dynamic_rms / self.kinematic_rms


@dataclass
class ComparisonReport:
    method_rows: list = field(default_factory=list)
    speed_rows: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    caveat: str = GROUND_TRUTH_CAVEAT

    def row(self, method: str, T_s: float) -> MethodRow:
        for r in self.method_rows:
            if r.method == method and math.isclose(r.T_s, T_s):
                return r
        raise KeyError((method, T_s))


def _open_loop(p, method, u0, delta, n_steps, T_s):
    schedule = [ControlInput(0.0, delta)] * n_steps
    if method == "kinematic":
        return itg.rollout(p, KinState(u=u0), schedule, StepConfig(T_s, "forward-euler"))
    try:
        return itg.rollout(p, DynState(u=u0), schedule, StepConfig(T_s, method), stop_on_divergence=True)
    except itg.RolloutError as exc:
        # forward Euler can drive u through zero on its way to blowing up
        traj = Trajectory([0.0], [DynState(u=u0).as_array()], [[0.0, delta]], meta={"error": str(exc)})
        traj.meta["diverged"] = True
        return traj


def _reference(p, u0, delta, n_steps, T_s, spec: OpenLoopSpec):
    cfg = StepConfig(T_s, "rk4-reference", min(spec.rk4_substep, T_s), spec.reference)
    return itg.integrate_rk4_reference(p, DynState(u=u0), [ControlInput(0.0, delta)] * n_steps, cfg)


def run_step_steer(spec: OpenLoopSpec = OpenLoopSpec(), p: VehicleParams = TABLE_I) -> ComparisonReport:
    """Step-steer response of each method at each step length.

    Divergence of a baseline is recorded in the report, never raised.
    """
    report = ComparisonReport()
    t0 = time.perf_counter()
    for T_s in spec.T_s_list:
        n = int(round(spec.duration / T_s))
        ref = _reference(p, spec.u0, spec.delta_step, n, T_s, spec)
        report.traces[("rk4-reference", T_s)] = ref
        for method in spec.methods:
            traj = _open_loop(p, method, spec.u0, spec.delta_step, n, T_s)
            report.traces[(method, T_s)] = traj
            divergent = bool(traj.meta.get("diverged", False))
            bounded = not divergent and bool(np.all(np.abs(traj.states) < 100.0))
            if traj.kind == "dyn":
                tv, tw = float(traj.states[-1, 4]), float(traj.states[-1, 5])
            else:
                tv, tw = math.nan, math.nan
            rms = rms_location_error(traj, ref) if len(traj) == len(ref) and not divergent else math.inf
            report.method_rows.append(MethodRow(T_s, method, divergent, bounded, tv, tw, rms))
    report.timing["wall_time"] = time.perf_counter() - t0
    return report


def run_speed_sweep(speeds=tuple(range(1, 11)), delta_step: float = 0.2674, duration: float = 4.0,
                    T_s: float = 0.1, p: VehicleParams = TABLE_I, reference: str = "full") -> ComparisonReport:
    """Location RMS error of the backward-variant and kinematic models per initial speed."""
    report = ComparisonReport()
    t0 = time.perf_counter()
    n = int(round(duration / T_s))
    for u0 in speeds:
        spec = OpenLoopSpec(u0=float(u0), delta_step=delta_step, duration=duration, T_s_list=(T_s,),
                            reference=reference)
        ref = _reference(p, float(u0), delta_step, n, T_s, spec)
        dyn = _open_loop(p, "backward-variant", float(u0), delta_step, n, T_s)
        kin = _open_loop(p, "kinematic", float(u0), delta_step, n, T_s)
        report.traces[("rk4-reference", float(u0))] = ref
        report.traces[("backward-variant", float(u0))] = dyn
        report.traces[("kinematic", float(u0))] = kin
        report.speed_rows.append(SpeedRow(float(u0), rms_location_error(dyn, ref), rms_location_error(kin, ref)))
    report.timing["wall_time"] = time.perf_counter() - t0
    return report


def run_condition_figure(p: VehicleParams = TABLE_I, T_s: float = 0.1, u_max: float = 15.0,
                         grid_points: int = 1000):
    """Condition sweep plus plot-ready ``{"u": ..., "norm": ...}`` series."""
    rep = condition_sweep(p, (0.0, u_max), T_s, grid_points)
    return rep, {"u": rep.u.copy(), "norm": rep.norms.copy()}


# ---------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class StopAndGoSpec:
    start: tuple = (0.0, 0.0)
    target: tuple = (30.0, 30.0)
    v_ref: float = 6.0
    obstacle_initial: tuple | None = (15.0, 15.0)
    obstacle_moved: tuple | None = (18.0, 12.0)
    D_s: float = 8.0
    mpc: MpcConfig = MpcConfig()
    predictor: str = "dyn"
    initial_speed: float = 0.0
    timeout: float = 30.0
    stop_speed: float = 0.01
    stop_steps: int = 3
    arrive_radius: float = 0.5

    def __post_init__(self):
        if not self.D_s > 0:
            raise ValidationError("D_s > 0")
        if self.predictor not in ("dyn", "kin"):
            raise ValidationError("predictor must be 'dyn' or 'kin'")
        if self.D_s != self.mpc.D_s:
            object.__setattr__(self, "mpc", replace(self.mpc, D_s=self.D_s))

    @property
    def T_s(self) -> float:
        return self.mpc.T_s


@dataclass
class StopAndGoResult:
    trajectory: Trajectory
    events: list
    solve_times: np.ndarray
    obstacle_track: np.ndarray
    infeasible_steps: int
    arrived: bool

    def event_time(self, name: str):
        for n, t in self.events:
            if n == name:
                return t
        return None


def run_stop_and_go(spec: StopAndGoSpec = StopAndGoSpec(), p: VehicleParams = TABLE_I,
                    *, raise_on_timeout: bool = True) -> StopAndGoResult:
    """Closed loop: build the reference, solve, apply the first input to the plant.

    The plant is the model matching the predictor (backward variant or
    kinematic forward Euler). When the vehicle has stood still for
    ``stop_steps`` samples the obstacle jumps to ``obstacle_moved``.
    """
    cfg = spec.mpc
    T_s = cfg.T_s
    start = np.asarray(spec.start, dtype=float)
    target = np.asarray(spec.target, dtype=float)
    heading = math.atan2(*(target - start)[::-1]) if np.any(target != start) else 0.0
    if spec.predictor == "dyn":
        predictor = DynamicPredictor(p)
        state = np.array([start[0], start[1], heading, spec.initial_speed, 0.0, 0.0])
        speed_idx = 3
    else:
        predictor = KinematicPredictor(p)
        state = np.array([start[0], start[1], spec.initial_speed, heading])
        speed_idx = 2

    obstacle = None if spec.obstacle_initial is None else np.asarray(spec.obstacle_initial, float)
    moved = False
    still = 0
    events = []
    states, inputs, solve_times, obs_track = [state.copy()], [], [], []
    infeasible = 0
    warm = None
    n_max = int(round(spec.timeout / T_s))
    arrived = False

    k = 0
    while True:
        t = k * T_s
        if np.hypot(*(state[:2] - target)) <= spec.arrive_radius:
            arrived = True
            events.append(("arrived", t))
            break
        if k >= n_max:
            break
        obs_track.append(np.full(2, np.nan) if obstacle is None else obstacle.copy())
        ref = build_reference_window(state[:2], target, spec.v_ref, T_s, cfg.N_p, obstacle)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", InfeasibleWarning)
            sol = solve_step(cfg, state, ref, predictor, warm_start=warm)
        if any(issubclass(w.category, InfeasibleWarning) for w in caught):
            infeasible += 1
        solve_times.append(sol.solve_stats.wall_time)
        warm = sol.decision
        inputs.append([sol.u_opt.a, sol.u_opt.delta])
        state = predictor.step(state[:, None], np.array([sol.u_opt.a]), np.array([sol.u_opt.delta]),
                               T_s)[:, 0]
        if not np.all(np.isfinite(state)):
            raise DomainError(f"plant state became non-finite at t = {t + T_s:.2f} s")
        states.append(state.copy())
        k += 1

        if state[speed_idx] < spec.stop_speed:
            still += 1
            if still == spec.stop_steps:
                events.append(("stopped", k * T_s))
                if not moved and spec.obstacle_moved is not None and obstacle is not None:
                    obstacle = np.asarray(spec.obstacle_moved, float)
                    moved = True
                    events.append(("obstacle_moved", k * T_s))
        else:
            still = 0

    inputs.append(inputs[-1] if inputs else [0.0, 0.0])
    obs_track.append(np.full(2, np.nan) if obstacle is None else obstacle.copy())
    traj = Trajectory(T_s * np.arange(len(states)), np.array(states), np.array(inputs),
                      kind=predictor.kind, meta={"scenario": "stop-and-go", "predictor": spec.predictor})
    result = StopAndGoResult(traj, events, np.array(solve_times), np.array(obs_track), infeasible, arrived)
    if not arrived and raise_on_timeout:
        raise ScenarioTimeout(f"target not reached within {spec.timeout} s", result)
    return result


@dataclass
class TimingStats:
    mean: float
    median: float
    p95: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> "TimingStats":
        s = np.asarray(samples, dtype=float)
        if s.size == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        return cls(float(s.mean()), float(np.median(s)), float(np.percentile(s, 95)), int(s.size))


def run_timing_benchmark(spec: StopAndGoSpec = StopAndGoSpec(), p: VehicleParams = TABLE_I,
                         repeats: int = 1) -> dict:
    """Per-step solve time over the full closed loop for both predictors.

    The loops are deterministic, so with ``repeats > 1`` the runs alternate
    between predictors and each step keeps its fastest time, which filters
    out scheduler noise.
    """
    if repeats < 1:
        raise ValueError("repeats >= 1")
    samples = {"dyn": [], "kin": []}
    for _ in range(repeats):
        for predictor in ("dyn", "kin"):
            res = run_stop_and_go(replace(spec, predictor=predictor), p, raise_on_timeout=False)
            samples[predictor].append(res.solve_times)
    return {k: TimingStats.from_samples(np.min(np.vstack(v), axis=0)) for k, v in samples.items()}

"""Discrete-time propagation of the bicycle models.

Three one-step maps are provided: the backward-Euler-inspired explicit step
of the dynamic model, forward Euler on either model, and a fixed-step RK4
integrator of the continuous dynamic model used as ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import (
    ControlInput,
    DomainError,
    DynState,
    KinState,
    ValidationError,
    VehicleParams,
    dyn_rhs_array,
    kin_rhs,
    tire_forces,
)

METHODS = ("backward-variant", "forward-euler", "rk4-reference")

# Variants of the continuous model the RK4 reference can integrate.
#   small-angle: cos(delta)=1, sin(delta)=0, v*omega kept in du/dt
#   full:        steering trigonometry kept, linear tires only
#   consistent:  small-angle without v*omega (the limit of the discrete step)
REFERENCE_VARIANTS = {
    "small-angle": dict(full_trig=False, longitudinal_coupling=True),
    "full": dict(full_trig=True, longitudinal_coupling=True),
    "consistent": dict(full_trig=False, longitudinal_coupling=False),
}

DIVERGENCE_THRESHOLD = 1e3


@dataclass(frozen=True)
class StepConfig:
    T_s: float = 0.1
    method: str = "backward-variant"
    rk4_substep: float = 0.001
    reference: str = "small-angle"

    def __post_init__(self):
        if not self.T_s > 0:
            raise ValidationError("T_s > 0")
        if not self.rk4_substep > 0:
            raise ValidationError("rk4_substep > 0")
        if self.rk4_substep > self.T_s:
            raise ValidationError("rk4_substep <= T_s")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.reference not in REFERENCE_VARIANTS:
            raise ValidationError(f"reference must be one of {tuple(REFERENCE_VARIANTS)}")


@dataclass
class Trajectory:
    """Uniformly sampled states with the input held over each interval.

    ``inputs[i]`` is the input applied on ``[t[i], t[i] + T_s)``; the final
    sample repeats the last applied input.
    """

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    kind: str = "dyn"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        n = self.t.shape[0]
        if self.states.shape[0] != n or self.inputs.shape[0] != n:
            raise ValueError("t, states and inputs must have the same number of samples")
        if n > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
                raise ValueError("timestamps must be uniformly spaced")

    def __len__(self):
        return self.t.shape[0]

    @property
    def T_s(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self) > 1 else float("nan")

    def state(self, i: int):
        cls = DynState if self.kind == "dyn" else KinState
        return cls.from_array(self.states[i])

    def input(self, i: int) -> ControlInput:
        return ControlInput(*self.inputs[i])

    @property
    def x(self):
        return self.states[:, 0]

    @property
    def y(self):
        return self.states[:, 1]

    def column(self, name: str) -> np.ndarray:
        order = ("x", "y", "phi", "u", "v", "omega") if self.kind == "dyn" else ("x", "y", "u", "phi")
        return self.states[:, order.index(name)]


def backward_variant_map(p: VehicleParams, X, a, delta, T_s):
    """Raw-array form of the explicit backward-variant step (batch friendly)."""
    x, y, phi, u, v, w = X
    c = p.yaw_coupling
    den_v = p.m * u - T_s * (p.k_f + p.k_r)
    den_w = p.I_z * u - T_s * p.yaw_stiffness
    cphi, sphi = np.cos(phi), np.sin(phi)
    return np.array([
        x + T_s * (u * cphi - v * sphi),
        y + T_s * (v * cphi + u * sphi),
        phi + T_s * w,
        u + T_s * a,
        (p.m * u * v + T_s * c * w - T_s * p.k_f * delta * u - T_s * p.m * u * u * w) / den_v,
        (p.I_z * u * w + T_s * c * v - T_s * p.l_f * p.k_f * delta * u) / den_w,
    ])


def step_backward_variant(p: VehicleParams, s: DynState, inp: ControlInput, T_s: float) -> DynState:
    """One step of the explicit backward-Euler-inspired dynamic model.

    ``x, y, phi, u`` advance by forward Euler; ``v`` and ``omega`` are the
    closed-form solutions of their own implicit equations, which keeps the
    map finite at ``u = 0``.
    """
    den_v = p.m * s.u - T_s * (p.k_f + p.k_r)
    den_w = p.I_z * s.u - T_s * p.yaw_stiffness
    if den_v == 0 or den_w == 0:
        raise DomainError(f"zero denominator in backward-variant step at u = {s.u!r}")
    return DynState.from_array(backward_variant_map(p, s.as_array(), inp.a, inp.delta, T_s))


def step_forward_euler_dyn(p: VehicleParams, s: DynState, inp: ControlInput, T_s: float) -> DynState:
    """Explicit Euler on the dynamic model.

    The longitudinal row uses the same simplification as the backward
    variant (``du/dt = a``), so the two steps differ only in how the lateral
    states are discretized.
    """
    # No epsilon floor on u: the low-speed failure is the point of this baseline.
    tire_forces(p, s, inp)
    X = s.as_array()
    return DynState.from_array(X + T_s * dyn_rhs_array(p, X, inp.a, inp.delta, longitudinal_coupling=False))


def step_forward_euler_kin(p: VehicleParams, s: KinState, inp: ControlInput, T_s: float) -> KinState:
    return KinState.from_array(s.as_array() + T_s * kin_rhs(p, s, inp))


def _as_schedule(inputs) -> list[ControlInput]:
    if isinstance(inputs, ControlInput):
        inputs = [inputs]
    schedule = [u if isinstance(u, ControlInput) else ControlInput(*u) for u in inputs]
    if not schedule:
        raise ValueError("input schedule must contain at least one entry")
    return schedule


def _pack(states, schedule, T_s, kind, meta=None) -> Trajectory:
    n = len(states)
    t = T_s * np.arange(n)
    U = np.array([schedule[min(i, len(schedule) - 1)].as_array() for i in range(n)])
    return Trajectory(t, np.array(states), U, kind=kind, meta=meta or {})


def integrate_rk4_reference(p: VehicleParams, s0: DynState, inputs: Sequence[ControlInput],
                            cfg: StepConfig | None = None) -> Trajectory:
    """Classical RK4 on the continuous dynamic model, sampled on the ``T_s`` grid.

    The inner step is the largest value not exceeding ``cfg.rk4_substep`` that
    divides ``T_s`` evenly. Raises :class:`DomainError` if ``u`` reaches zero.
    """
    cfg = cfg or StepConfig(method="rk4-reference")
    schedule = _as_schedule(inputs)
    n_sub = max(1, math.ceil(cfg.T_s / cfg.rk4_substep - 1e-9))
    h = cfg.T_s / n_sub
    opts = REFERENCE_VARIANTS[cfg.reference]
    if not s0.u > 0:
        raise DomainError("RK4 reference requires u > 0")

    X = s0.as_array()
    out = [X.copy()]
    for k, inp in enumerate(schedule):
        def f(Z):
            if not Z[3] > 0:
                raise DomainError(f"u crossed zero inside reference interval {k}")
            return dyn_rhs_array(p, Z, inp.a, inp.delta, **opts)

        for _ in range(n_sub):
            k1 = f(X)
            k2 = f(X + 0.5 * h * k1)
            k3 = f(X + 0.5 * h * k2)
            k4 = f(X + h * k3)
            X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not X[3] > 0:
            raise DomainError(f"u crossed zero inside reference interval {k}")
        out.append(X.copy())
    return _pack(out, schedule, cfg.T_s, "dyn", {"method": "rk4-reference", "reference": cfg.reference})


class RolloutError(DomainError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


def rollout(p: VehicleParams, s0, inputs, cfg: StepConfig | None = None, *,
            stop_on_divergence: bool = False) -> Trajectory:
    """Apply the configured step method once per scheduled input.

    The state type selects the model: :class:`DynState` uses the dynamic
    model, :class:`KinState` the kinematic one (forward Euler only). With
    ``stop_on_divergence`` the rollout ends at the first divergent sample
    instead of overflowing; ``meta["diverged"]`` records the outcome.
    """
    cfg = cfg or StepConfig()
    schedule = _as_schedule(inputs)
    if cfg.method == "rk4-reference":
        return integrate_rk4_reference(p, s0, schedule, cfg)

    if isinstance(s0, KinState):
        if cfg.method != "forward-euler":
            raise ValidationError("the kinematic model is only discretized by forward Euler")
        step, kind = step_forward_euler_kin, "kin"
    elif cfg.method == "backward-variant":
        step, kind = step_backward_variant, "dyn"
    else:
        step, kind = step_forward_euler_dyn, "dyn"

    states = [s0.as_array()]
    s = s0
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k, inp in enumerate(schedule):
            try:
                s = step(p, s, inp, cfg.T_s)
            except DomainError as exc:
                raise RolloutError(k, exc) from exc
            states.append(s.as_array())
            if stop_on_divergence and is_divergent(states[-1]):
                diverged = True
                break
    traj = _pack(states, schedule, cfg.T_s, kind, {"method": cfg.method})
    traj.meta["diverged"] = diverged or is_divergent(traj.states)
    return traj


def is_divergent(states, threshold: float = DIVERGENCE_THRESHOLD) -> bool:
    """True when any component is non-finite or exceeds ``threshold`` in magnitude."""
    A = np.asarray(states, dtype=float)
    return bool(np.any(~np.isfinite(A)) or np.any(np.abs(A) > threshold))

"""Vehicle parameters, state types and continuous-time bicycle models.

Dynamic state order is ``(x, y, phi, u, v, omega)``; kinematic state order is
``(x, y, u, phi)``. Angles are never wrapped.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import astuple, dataclass, fields

import numpy as np


class DomainError(ValueError):
    """A model was evaluated outside the region where it is defined."""


class ValidationError(ValueError):
    """A parameter set violates one of its invariants."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1412.0          # kg
    I_z: float = 1536.7        # kg m^2
    l_f: float = 1.06          # m, C.G. to front axle
    l_r: float = 1.85          # m, C.G. to rear axle
    k_f: float = -128916.0     # N/rad, front axle sideslip stiffness
    k_r: float = -85944.0      # N/rad, rear axle sideslip stiffness

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "k_f", "k_r"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite")
        for name in ("m", "I_z", "l_f", "l_r"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} > 0")
        for name in ("k_f", "k_r"):
            if getattr(self, name) >= 0:
                raise ValidationError(f"{name} < 0")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    @property
    def yaw_coupling(self) -> float:
        """``l_f k_f - l_r k_r``, the cross term shared by both lateral rows."""
        return self.l_f * self.k_f - self.l_r * self.k_r

    @property
    def yaw_stiffness(self) -> float:
        """``l_f^2 k_f + l_r^2 k_r``."""
        return self.l_f**2 * self.k_f + self.l_r**2 * self.k_r


TABLE_I = VehicleParams()


class _StateMixin:
    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float).ravel()
        names = [f.name for f in fields(cls)]
        if values.shape[0] != len(names):
            raise ValueError(f"{cls.__name__} needs {len(names)} components, got {values.shape[0]}")
        return cls(*(float(v) for v in values))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in astuple(self))


@dataclass(frozen=True)
class DynState(_StateMixin):
    x: float = 0.0
    y: float = 0.0
    phi: float = 0.0
    u: float = 0.0
    v: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class KinState(_StateMixin):
    x: float = 0.0
    y: float = 0.0
    u: float = 0.0
    phi: float = 0.0


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.delta)):
            raise ValidationError("control input must be finite")
        if abs(self.delta) > math.pi / 2:
            raise ValidationError("|delta| <= pi/2")
        if abs(self.delta) > math.pi / 4:
            warnings.warn(
                f"steering angle {self.delta:.3f} rad is beyond the mild-steering range",
                RuntimeWarning,
                stacklevel=3,
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta])


@dataclass(frozen=True)
class TireForces:
    F_Y1: float
    F_Y2: float
    alpha_f: float
    alpha_r: float


def tire_forces(p: VehicleParams, s: DynState, inp: ControlInput) -> TireForces:
    """Linear lateral tire forces at front and rear axle."""
    if not s.u > 0:
        raise DomainError(f"slip angles are undefined for u = {s.u!r} <= 0")
    alpha_f = (s.v + p.l_f * s.omega) / s.u - inp.delta
    alpha_r = (s.v - p.l_r * s.omega) / s.u
    return TireForces(p.k_f * alpha_f, p.k_r * alpha_r, alpha_f, alpha_r)


def dyn_rhs_array(p: VehicleParams, X, a, delta, *, full_trig=False, longitudinal_coupling=True):
    """Right-hand side of the dynamic model on raw (possibly batched) arrays.

    ``X`` has the six state components along axis 0. No domain checks are
    made here.
    """
    x, y, phi, u, v, w = X
    F1 = p.k_f * ((v + p.l_f * w) / u - delta)
    F2 = p.k_r * (v - p.l_r * w) / u
    if full_trig:
        c, sn = np.cos(delta), np.sin(delta)
    else:
        c, sn = 1.0, 0.0
    cphi, sphi = np.cos(phi), np.sin(phi)
    du = a - F1 * sn / p.m
    if longitudinal_coupling:
        du = du + v * w
    return np.array([
        u * cphi - v * sphi,
        v * cphi + u * sphi,
        w,
        du,
        -u * w + (F1 * c + F2) / p.m,
        (p.l_f * F1 * c - p.l_r * F2) / p.I_z,
    ])


def dyn_rhs(p: VehicleParams, s: DynState, inp: ControlInput, *,
            full_trig: bool = False, longitudinal_coupling: bool = True) -> np.ndarray:
    """Time derivative of the dynamic bicycle state.

    By default the mild-steering simplification is applied (``cos delta = 1``,
    ``sin delta = 0``) and the ``v * omega`` term stays in the longitudinal
    row. ``full_trig=True`` keeps the steering trigonometry;
    ``longitudinal_coupling=False`` drops ``v * omega``, which gives the
    continuous model that the backward-variant step is consistent with.
    """
    tire_forces(p, s, inp)  # domain check
    return dyn_rhs_array(p, s.as_array(), inp.a, inp.delta,
                         full_trig=full_trig, longitudinal_coupling=longitudinal_coupling)


def slip_angle_cg(p: VehicleParams, delta):
    return np.arctan(np.tan(delta) * p.l_r / p.wheelbase)


def kin_rhs_array(p: VehicleParams, X, a, delta):
    x, y, u, phi = X
    beta = slip_angle_cg(p, delta)
    return np.array([
        u * np.cos(phi + beta),
        u * np.sin(phi + beta),
        a + 0.0 * u,
        u / p.l_r * np.sin(beta),
    ])


def kin_rhs(p: VehicleParams, s: KinState, inp: ControlInput) -> np.ndarray:
    """Time derivative of the kinematic bicycle state ``(x, y, u, phi)``."""
    if abs(inp.delta) >= math.pi / 2:
        raise DomainError("tan(delta) is singular at |delta| = pi/2")
    return kin_rhs_array(p, s.as_array(), inp.a, inp.delta)

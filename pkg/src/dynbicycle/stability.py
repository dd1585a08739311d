"""Linearized error propagation of the backward-variant step.

Only the reduced ``(u, v, omega)`` system is analysed. Its Jacobian has the
block form ``[[1, 0], [b, A_hat]]``, so long products keep that shape and
stability reduces to bounding ``A_hat`` products and the accumulated ``b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrate import Trajectory
from .models import ControlInput, DomainError, DynState, VehicleParams


@dataclass(frozen=True)
class JacobianBlocks:
    b1: float
    b2: float
    A_hat: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b1, self.b2])

    def full(self) -> np.ndarray:
        """The 3x3 Jacobian of ``(u, v, omega)`` at the next step."""
        A = np.zeros((3, 3))
        A[0, 0] = 1.0
        A[1:, 0] = self.b
        A[1:, 1:] = self.A_hat
        return A


def _a_hat_entries(p: VehicleParams, u, T_s):
    den_v = p.m * u - T_s * (p.k_f + p.k_r)
    den_w = p.I_z * u - T_s * p.yaw_stiffness
    c = p.yaw_coupling
    return (
        p.m * u / den_v,
        (T_s * c - T_s * p.m * u * u) / den_v,
        T_s * c / den_w,
        p.I_z * u / den_w,
    )


def _b_entries(p: VehicleParams, u, v, w, d, T_s):
    den_v = p.m * u - T_s * (p.k_f + p.k_r)
    den_w = p.I_z * u - T_s * p.yaw_stiffness
    c = p.yaw_coupling
    num_v = p.m * u * v + T_s * c * w - T_s * p.k_f * d * u - T_s * p.m * u * u * w
    num_w = p.I_z * u * w + T_s * c * v - T_s * p.l_f * p.k_f * d * u
    # quotient rule with d(den_v)/du = m and d(den_w)/du = I_z
    b1 = ((p.m * v - T_s * p.k_f * d - 2 * T_s * p.m * u * w) * den_v - p.m * num_v) / den_v**2
    b2 = ((p.I_z * w - T_s * p.l_f * p.k_f * d) * den_w - p.I_z * num_w) / den_w**2
    return b1, b2


def a_hat(p: VehicleParams, u: float, T_s: float) -> np.ndarray:
    """``A_hat`` depends on speed and step length only."""
    a11, a12, a21, a22 = _a_hat_entries(p, u, T_s)
    return np.array([[a11, a12], [a21, a22]])


def jacobian_blocks(p: VehicleParams, s: DynState, inp: ControlInput, T_s: float) -> JacobianBlocks:
    """Analytic partial derivatives of the backward-variant ``(v, omega)`` rows."""
    u, v, w, d = s.u, s.v, s.omega, inp.delta
    if p.m * u - T_s * (p.k_f + p.k_r) == 0 or p.I_z * u - T_s * p.yaw_stiffness == 0:
        raise DomainError(f"zero denominator in Jacobian at u = {u!r}")
    b1, b2 = _b_entries(p, u, v, w, d, T_s)
    return JacobianBlocks(float(b1), float(b2), a_hat(p, u, T_s))


def spectral_norm_2x2(M) -> float:
    """Largest singular value of a 2x2 matrix, from the eigenvalues of M^T M."""
    (a, b), (c, d) = np.asarray(M, dtype=float)
    # M^T M = [[p, q], [q, r]]
    p = a * a + c * c
    q = a * b + c * d
    r = b * b + d * d
    half_trace = 0.5 * (p + r)
    disc = math.hypot(0.5 * (p - r), q)
    return math.sqrt(half_trace + disc)


def _spectral_norm_2x2_batch(a, b, c, d):
    p = a * a + c * c
    q = a * b + c * d
    r = b * b + d * d
    return np.sqrt(0.5 * (p + r) + np.hypot(0.5 * (p - r), q))


@dataclass
class SweepReport:
    u: np.ndarray
    T_s: float
    norms: np.ndarray

    @property
    def grid(self):
        return [(float(u), self.T_s, float(n)) for u, n in zip(self.u, self.norms)]

    @property
    def max_norm(self) -> float:
        return float(np.max(self.norms))

    @property
    def argmax_u(self) -> float:
        return float(self.u[int(np.argmax(self.norms))])

    @property
    def condition_holds(self) -> bool:
        return self.max_norm <= 1.0


def condition_sweep(p: VehicleParams, u_range=(0.0, 15.0), T_s: float = 0.1,
                    grid_points: int = 1000) -> SweepReport:
    """Evaluate ``||A_hat||_2`` on a uniform speed grid."""
    lo, hi = map(float, u_range)
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid speed range {u_range!r}")
    if grid_points < 2 and hi > lo:
        raise ValueError("grid_points >= 2")
    u = np.array([lo]) if hi == lo else np.linspace(lo, hi, grid_points)
    norms = _spectral_norm_2x2_batch(*_a_hat_entries(p, u, T_s))
    return SweepReport(u, float(T_s), norms)


@dataclass
class PropagationAudit:
    A_norms: np.ndarray          # ||A_hat_k||
    b_norms: np.ndarray          # ||b_k||
    A_prod_norms: np.ndarray     # ||A_hat_{k,0}||
    A_norm_products: np.ndarray  # prod_j ||A_hat_j||
    b_acc_norms: np.ndarray      # ||b_{k,0}||
    A_star: float
    b_star: float
    first_row_exact: bool

    @property
    def bound_b(self) -> np.ndarray:
        k = np.arange(self.b_acc_norms.shape[0])
        if self.A_star == 1.0:
            return self.b_star * (k + 1.0)
        return self.b_star * (1.0 - self.A_star ** (k + 1)) / (1.0 - self.A_star)

    @property
    def A_bounded(self) -> bool:
        return bool(np.all(self.A_prod_norms <= 1.0))

    @property
    def b_bounded(self) -> bool:
        return bool(np.all(self.b_acc_norms <= self.bound_b))


def envelope_maxima(p: VehicleParams, T_s: float, u_max: float = 15.0, v_max: float = 4.0,
                    w_max: float = 3.0, delta_max: float = math.pi / 4, points: int = 21):
    """``(||A_hat_*||, ||b_*||)`` maximised over a grid of the physical envelope."""
    A_star = condition_sweep(p, (0.0, u_max), T_s, 10 * points).max_norm
    u, v, w, d = np.meshgrid(np.linspace(0.0, u_max, points), np.linspace(-v_max, v_max, points),
                             np.linspace(-w_max, w_max, points), np.linspace(-delta_max, delta_max, points),
                             indexing="ij")
    b1, b2 = _b_entries(p, u, v, w, d, T_s)
    return A_star, float(np.max(np.hypot(b1, b2)))


def propagation_audit(p: VehicleParams, traj: Trajectory, *, T_s: float | None = None,
                      envelope: bool = False) -> PropagationAudit:
    """Accumulate Jacobian block products along a backward-variant trajectory.

    Step ``k`` linearizes about sample ``k`` and its input; the last sample is
    terminal and contributes no step, except for a single-sample trajectory
    which is audited as one step (``T_s`` must then be given). ``A_star`` and
    ``b_star`` are maxima over the realized steps, or over the physical
    envelope when ``envelope`` is set.
    """
    if traj.kind != "dyn":
        raise ValueError("propagation audit needs a dynamic-model trajectory")
    T_s = traj.T_s if T_s is None else T_s
    if not T_s > 0:
        raise ValueError("T_s is required to audit a single-sample trajectory")
    n_steps = max(len(traj) - 1, 1)

    A_norms, b_norms, prod_norms, norm_products, b_acc_norms = [], [], [], [], []
    A_acc = np.eye(2)
    b_acc = np.zeros(2)
    full_acc = np.eye(3)
    running = 1.0
    for k in range(n_steps):
        J = jacobian_blocks(p, traj.state(k), traj.input(k), T_s)
        b_acc = J.b + J.A_hat @ b_acc
        A_acc = J.A_hat @ A_acc
        full_acc = J.full() @ full_acc
        nA = spectral_norm_2x2(J.A_hat)
        running *= nA
        A_norms.append(nA)
        b_norms.append(float(np.linalg.norm(J.b)))
        prod_norms.append(spectral_norm_2x2(A_acc))
        norm_products.append(running)
        b_acc_norms.append(float(np.linalg.norm(b_acc)))

    if envelope:
        A_star, b_star = envelope_maxima(p, T_s)
    else:
        A_star, b_star = max(A_norms), max(b_norms)
    return PropagationAudit(
        A_norms=np.array(A_norms),
        b_norms=np.array(b_norms),
        A_prod_norms=np.array(prod_norms),
        A_norm_products=np.array(norm_products),
        b_acc_norms=np.array(b_acc_norms),
        A_star=float(A_star),
        b_star=float(b_star),
        first_row_exact=bool(np.array_equal(full_acc[0], [1.0, 0.0, 0.0])),
    )

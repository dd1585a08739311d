"""Nonlinear MPC with a quadratic tracking cost and a circular obstacle.

Predictions are evaluated in batches: every candidate input sequence is one
column of the state arrays, so a grid of candidates costs one vectorized
rollout. With a control horizon of one the decision space is the 2-D input
box, which a coarse grid followed by a bounded pattern search covers
reliably. Constraints enter the merit function as an exact L1 penalty.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .integrate import backward_variant_map
from .models import (
    TABLE_I,
    ControlInput,
    DynState,
    KinState,
    ValidationError,
    VehicleParams,
    kin_rhs_array,
)


class InfeasibleWarning(UserWarning):
    """No admissible input satisfies every constraint; the least-violating one is returned."""


def _diag(values, n, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        if arr.shape != (n, n) or np.any(arr - np.diag(np.diag(arr))):
            raise ValidationError(f"{name} must be a diagonal {n}x{n} matrix")
        arr = np.diag(arr).copy()
    if arr.shape != (n,):
        raise ValidationError(f"{name} must have {n} diagonal entries")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} entries must be finite and >= 0")
    return arr


@dataclass(frozen=True)
class MpcConfig:
    """Problem data of the optimal control problem (diagonal weights as vectors)."""

    N_p: int = 20
    N_c: int = 1
    T_s: float = 0.1
    Q: Sequence[float] = (100.0, 100.0, 0.0, 0.0, 0.0, 0.0)
    R: Sequence[float] = (10.0, 500.0)
    Q_s: Sequence[float] = (1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    D_s: float = 8.0
    X_min: Sequence[float] = (-math.inf, -math.inf, -math.inf, 0.0, -4.0, -3.0)
    X_max: Sequence[float] = (math.inf, math.inf, math.inf, 20.0, 4.0, 3.0)
    U_min: Sequence[float] = (-5.0, -math.pi / 4)
    U_max: Sequence[float] = (2.0, math.pi / 4)
    penalty: float = 1e6
    grid: int = 41
    n_seeds: int = 4
    n_polish: int = 3
    feas_tol: float = 1e-6
    tol: float = 1e-7
    max_iter: int = 400

    def __post_init__(self):
        if not (isinstance(self.N_p, int) and isinstance(self.N_c, int)):
            raise ValidationError("N_p and N_c must be integers")
        if not (self.N_p >= self.N_c >= 1):
            raise ValidationError("N_p >= N_c >= 1")
        if not self.T_s > 0:
            raise ValidationError("T_s > 0")
        if not self.D_s > 0:
            raise ValidationError("D_s > 0")
        set_ = object.__setattr__
        set_(self, "Q", _diag(self.Q, 6, "Q"))
        set_(self, "R", _diag(self.R, 2, "R"))
        set_(self, "Q_s", _diag(self.Q_s, 6, "Q_s"))
        for lo, hi, n in (("X_min", "X_max", 6), ("U_min", "U_max", 2)):
            a = np.asarray(getattr(self, lo), dtype=float)
            b = np.asarray(getattr(self, hi), dtype=float)
            if a.shape != (n,) or b.shape != (n,):
                raise ValidationError(f"{lo}/{hi} must have {n} entries")
            if np.any(a > b):
                raise ValidationError(f"{lo} <= {hi} elementwise")
            set_(self, lo, a)
            set_(self, hi, b)
        if not np.all(np.isfinite(self.U_min) & np.isfinite(self.U_max)):
            raise ValidationError("input bounds must be finite")
        if self.grid < 2:
            raise ValidationError("grid >= 2")


# ---------------------------------------------------------------------------
# predictors


class DynamicPredictor:
    """Backward-variant dynamic bicycle model as MPC predictor.

    With ``hold_at_standstill`` a braking input saturates at ``u = 0``
    instead of reversing the vehicle.
    """

    kind = "dyn"
    state_dim = 6
    dyn_index = np.arange(6)
    speed_index = 3

    def __init__(self, params: VehicleParams = TABLE_I, hold_at_standstill: bool = True):
        self.params = params
        self.hold_at_standstill = hold_at_standstill

    def step(self, X, a, delta, T_s):
        Xn = backward_variant_map(self.params, X, a, delta, T_s)
        if self.hold_at_standstill:
            Xn[3] = np.maximum(Xn[3], np.minimum(X[3], 0.0))
        return Xn

    def coerce(self, state) -> np.ndarray:
        if isinstance(state, KinState):
            raise TypeError("dynamic predictor needs a DynState")
        arr = state.as_array() if isinstance(state, DynState) else np.asarray(state, dtype=float)
        if arr.shape != (6,):
            raise ValueError("dynamic state must have 6 components")
        return arr


class KinematicPredictor:
    """Forward-Euler kinematic bicycle model as MPC predictor."""

    kind = "kin"
    state_dim = 4
    # kinematic (x, y, u, phi) -> dynamic-layout indices
    dyn_index = np.array([0, 1, 3, 2])
    speed_index = 2

    def __init__(self, params: VehicleParams = TABLE_I, hold_at_standstill: bool = True):
        self.params = params
        self.hold_at_standstill = hold_at_standstill

    def step(self, X, a, delta, T_s):
        Xn = X + T_s * kin_rhs_array(self.params, X, a, delta)
        if self.hold_at_standstill:
            Xn[2] = np.maximum(Xn[2], np.minimum(X[2], 0.0))
        return Xn

    def coerce(self, state) -> np.ndarray:
        if isinstance(state, DynState):
            raise TypeError("kinematic predictor needs a KinState")
        arr = state.as_array() if isinstance(state, KinState) else np.asarray(state, dtype=float)
        if arr.shape != (4,):
            raise ValueError("kinematic state must have 4 components")
        return arr


# ---------------------------------------------------------------------------
# reference


@dataclass
class ReferenceWindow:
    """Reference states and obstacle positions for prediction steps 1..N_p.

    Both arrays use the dynamic state layout; entries not weighted by the
    cost or obstacle metric are zero-filled.
    """

    points: np.ndarray
    obstacle: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.obstacle = np.atleast_2d(np.asarray(self.obstacle, dtype=float))
        if self.points.shape != self.obstacle.shape or self.points.shape[1] != 6:
            raise ValueError("points and obstacle must both be (N_p, 6)")

    def __len__(self):
        return self.points.shape[0]


def build_reference_window(position, target, v_ref: float, T_s: float, N_p: int,
                           obstacle=None) -> ReferenceWindow:
    """Points spaced ``v_ref * T_s`` along the straight line from ``position`` to ``target``.

    Points stop at the target. The obstacle is held at its current location
    for the whole window; ``None`` places it at infinity.
    """
    p = np.asarray(position, dtype=float)[:2]
    g = np.asarray(target, dtype=float)[:2]
    gap = g - p
    dist = float(np.hypot(*gap))
    e = gap / dist if dist > 0 else np.zeros(2)
    bearing = math.atan2(gap[1], gap[0]) if dist > 0 else 0.0
    s = np.minimum(v_ref * T_s * np.arange(1, N_p + 1), dist)
    points = np.zeros((N_p, 6))
    points[:, 0] = p[0] + s * e[0]
    points[:, 1] = p[1] + s * e[1]
    points[:, 2] = bearing
    points[:, 3] = v_ref
    obs = np.zeros((N_p, 6))
    if obstacle is None:
        obs[:, :2] = math.inf
    else:
        obs[:, :2] = np.asarray(obstacle, dtype=float)[:2]
    return ReferenceWindow(points, obs)


# ---------------------------------------------------------------------------
# cost and constraints


def _as_decision(U, N_c) -> np.ndarray:
    """Input sequence -> flat decision vector ``[a_0, d_0, a_1, d_1, ...]``."""
    if isinstance(U, ControlInput):
        U = [U]
    rows = [u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float) for u in U]
    Z = np.asarray(rows, dtype=float).reshape(-1, 2)
    if Z.shape[0] != N_c:
        raise ValueError(f"expected {N_c} inputs (control horizon), got {Z.shape[0]}")
    return Z.ravel()


def predict_batch(cfg: MpcConfig, predictor, x0, Z) -> np.ndarray:
    """Roll ``N_p`` steps for each decision row of ``Z``.

    Returns ``(N_p + 1, state_dim, n)``; inputs beyond the control horizon
    repeat the last decision.
    """
    Z = np.atleast_2d(Z)
    n = Z.shape[0]
    X = np.repeat(np.asarray(x0, dtype=float)[:, None], n, axis=1)
    out = np.empty((cfg.N_p + 1, X.shape[0], n))
    out[0] = X
    for k in range(cfg.N_p):
        j = min(k, cfg.N_c - 1)
        X = predictor.step(X, Z[:, 2 * j], Z[:, 2 * j + 1], cfg.T_s)
        out[k + 1] = X
    return out


@dataclass
class ViolationReport:
    """Signed constraint margins; negative entries are violations."""

    obstacle: np.ndarray      # (N_p,)
    state_lower: np.ndarray   # (N_p, state_dim)
    state_upper: np.ndarray
    input_lower: np.ndarray   # (N_c, 2)
    input_upper: np.ndarray

    @property
    def total(self) -> float:
        return float(sum(np.sum(np.maximum(0.0, -m)) for m in
                         (self.obstacle, self.state_lower, self.state_upper,
                          self.input_lower, self.input_upper)))

    @property
    def feasible(self) -> bool:
        return all(np.all(m >= 0) for m in
                   (self.obstacle, self.state_lower, self.state_upper,
                    self.input_lower, self.input_upper))

    def first_obstacle_violation(self):
        """1-based prediction step of the first obstacle violation, or ``None``."""
        idx = np.flatnonzero(self.obstacle < 0)
        return int(idx[0]) + 1 if idx.size else None


class _Problem:
    """One OCP instance, evaluated for batches of decision vectors."""

    def __init__(self, cfg: MpcConfig, x0, ref: ReferenceWindow, predictor):
        if len(ref) != cfg.N_p:
            raise ValueError(f"reference window has {len(ref)} points, N_p = {cfg.N_p}")
        self.cfg = cfg
        self.predictor = predictor
        self.x0 = predictor.coerce(x0)
        idx = predictor.dyn_index
        self.q = cfg.Q[idx]
        self.qs = cfg.Q_s[idx]
        self.x_min = cfg.X_min[idx]
        self.x_max = cfg.X_max[idx]
        self.ref = ref.points[:, idx]
        self.obs = ref.obstacle[:, idx]
        self.q_on = self.q > 0
        self.qs_on = self.qs > 0

    def rollout(self, Z):
        return predict_batch(self.cfg, self.predictor, self.x0, Z)

    def objective(self, Z, traj=None):
        Z = np.atleast_2d(Z)
        traj = self.rollout(Z) if traj is None else traj
        err = traj[1:, self.q_on, :] - self.ref[:, self.q_on, None]
        state_cost = np.einsum("kin,i->n", err * err, self.q[self.q_on])
        U = Z.reshape(Z.shape[0], -1, 2)
        per_step = U * U @ self.cfg.R  # (n, N_c)
        held = self.cfg.N_p - (self.cfg.N_c - 1)
        input_cost = per_step[:, :-1].sum(axis=1) + held * per_step[:, -1]
        return state_cost + input_cost

    def margins(self, Z, traj=None):
        Z = np.atleast_2d(Z)
        traj = self.rollout(Z) if traj is None else traj
        X = traj[1:]
        d = X[:, self.qs_on, :] - self.obs[:, self.qs_on, None]
        with np.errstate(invalid="ignore"):
            obstacle = np.einsum("kin,i->kn", d * d, self.qs[self.qs_on]) - self.cfg.D_s**2
        obstacle = np.nan_to_num(obstacle, nan=math.inf)
        with np.errstate(invalid="ignore"):
            lower = np.nan_to_num(X - self.x_min[None, :, None], nan=math.inf)
            upper = np.nan_to_num(self.x_max[None, :, None] - X, nan=math.inf)
        U = Z.reshape(Z.shape[0], -1, 2)
        return obstacle, lower, upper, U - self.cfg.U_min, self.cfg.U_max - U

    def violation(self, Z, traj=None):
        obstacle, lower, upper, ulo, uhi = self.margins(Z, traj)
        neg = lambda m, axes: np.maximum(0.0, -m).sum(axis=axes)
        return neg(obstacle, 0) + neg(lower, (0, 1)) + neg(upper, (0, 1)) + neg(ulo, (1, 2)) + neg(uhi, (1, 2))

    def merit(self, Z):
        Z = np.atleast_2d(Z)
        traj = self.rollout(Z)
        return self.objective(Z, traj) + self.cfg.penalty * self.violation(Z, traj)


def ocp_cost(cfg: MpcConfig, x0, U, ref: ReferenceWindow, predictor=None) -> float:
    """Quadratic tracking cost of the input sequence ``U`` (length ``N_c``).

    State errors are summed over prediction steps ``1..N_p`` and input costs
    over the ``N_p`` applied inputs.
    """
    predictor = predictor or DynamicPredictor()
    prob = _Problem(cfg, x0, ref, predictor)
    return float(prob.objective(_as_decision(U, cfg.N_c))[0])


def constraint_violations(cfg: MpcConfig, x0, U, ref: ReferenceWindow, predictor=None) -> ViolationReport:
    predictor = predictor or DynamicPredictor()
    prob = _Problem(cfg, x0, ref, predictor)
    obstacle, lower, upper, ulo, uhi = prob.margins(_as_decision(U, cfg.N_c))
    return ViolationReport(obstacle[:, 0], lower[:, :, 0], upper[:, :, 0], ulo[0], uhi[0])


def merit_batch(cfg: MpcConfig, x0, Z, ref: ReferenceWindow, predictor=None) -> np.ndarray:
    """Penalized objective for each row of ``Z`` (shape ``(n, 2 * N_c)``)."""
    return _Problem(cfg, x0, ref, predictor or DynamicPredictor()).merit(Z)


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveStats:
    iterations: int = 0
    evaluations: int = 0
    wall_time: float = 0.0


@dataclass
class MpcSolution:
    u_opt: ControlInput
    cost: float
    merit: float
    violation: float
    predicted: np.ndarray
    feasible: bool
    decision: np.ndarray
    solve_stats: SolveStats = field(default_factory=SolveStats)


def pattern_search(fun: Callable[[np.ndarray], np.ndarray], lower, upper, seeds, step0,
                   tol: float = 1e-7, max_iter: int = 400, diagonal: bool = True,
                   return_all: bool = False):
    """Bounded compass search run on several seeds at once.

    Each iteration evaluates the coordinate neighbours (in 2-D with
    ``diagonal``, 16 compass directions) of every active seed in one batch, moves
    to the best improving neighbour, and halves the step of a seed that fails
    to improve.

    Returns ``(best_point, best_value, iterations, evaluations)``; with
    ``return_all`` the first two are the end points and values of every seed.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    X = np.clip(np.atleast_2d(np.asarray(seeds, dtype=float)), lower, upper)
    dim = X.shape[1]
    F = fun(X)
    evals = X.shape[0]
    steps = np.tile(np.asarray(step0, dtype=float), (X.shape[0], 1))
    if dim == 2 and diagonal:
        # 16 compass points; the extra directions let the search slide along
        # the kinks an exact penalty creates at active constraints
        ang = np.arange(16) * np.pi / 8
        dirs = np.column_stack([np.cos(ang), np.sin(ang)])
        dirs /= np.abs(dirs).max(axis=1, keepdims=True)
    else:
        dirs = np.vstack([np.eye(dim), -np.eye(dim)])
    span = np.maximum(upper - lower, 1e-300)
    it = 0
    for it in range(1, max_iter + 1):
        active = np.any(steps / span > tol, axis=1)
        if not active.any():
            break
        ids = np.flatnonzero(active)
        cand = X[ids, None, :] + dirs[None, :, :] * steps[ids, None, :]
        cand = np.clip(cand, lower, upper).reshape(-1, dim)
        Fc = fun(cand).reshape(len(ids), len(dirs))
        evals += cand.shape[0]
        best = np.argmin(Fc, axis=1)
        fbest = Fc[np.arange(len(ids)), best]
        improved = fbest < F[ids]
        moved = ids[improved]
        X[moved] = cand.reshape(len(ids), len(dirs), dim)[improved, best[improved]]
        F[moved] = fbest[improved]
        steps[ids[~improved]] *= 0.5
    if return_all:
        return X, F, it, evals
    i = int(np.argmin(F))
    return X[i], float(F[i]), it, evals


def _grid_local_minima(F: np.ndarray) -> np.ndarray:
    """Cells no larger than any of their 8 neighbours."""
    P = np.pad(F, 1, constant_values=np.inf)
    n, m = F.shape
    mask = np.ones_like(F, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                mask &= F <= P[1 + di:1 + di + n, 1 + dj:1 + dj + m]
    return mask


def _local_grid_polish(fun, lower, upper, Z, FZ, step0, points=11, span=2.0, levels=20):
    """Shrinking local grids around each start point, evaluated in one batch.

    The exact penalty leaves narrow, curved descent valleys along active
    constraints. Compass and simplex moves stall in them; a window that
    covers a couple of grid cells and halves every level follows the floor.
    """
    Z = np.array(Z, dtype=float)
    FZ = np.array(FZ, dtype=float)
    h = span * np.asarray(step0, dtype=float)
    o = np.linspace(-1.0, 1.0, points)
    offsets = np.column_stack([np.repeat(o, points), np.tile(o, points)])
    n_eval = 0
    for _ in range(levels):
        C = np.clip(Z[:, None, :] + offsets[None] * h, lower, upper)
        F = fun(C.reshape(-1, 2)).reshape(C.shape[:2])
        n_eval += F.size
        best = np.argmin(F, axis=1)
        fbest = F[np.arange(len(Z)), best]
        better = fbest < FZ
        Z[better] = C[better, best[better]]
        FZ[better] = fbest[better]
        h = 0.5 * h
    i = int(np.argmin(FZ))
    return Z[i], float(FZ[i]), n_eval


def _distinct_best(Z, FZ, k, scale):
    """Indices of the ``k`` lowest values whose points differ by over a cell."""
    keep = []
    for i in np.argsort(FZ, kind="stable"):
        if all(np.any(np.abs(Z[i] - Z[j]) > scale) for j in keep):
            keep.append(i)
        if len(keep) == k:
            break
    return np.array(keep)


def solve_step(cfg: MpcConfig, x0, ref: ReferenceWindow, predictor=None, *,
               warm_start=None, solver: Callable | None = None) -> MpcSolution:
    """Minimize the penalized OCP over the input box.

    The default solver seeds a bounded pattern search from the best points of
    a ``cfg.grid`` x ``cfg.grid`` scan of the input box (held over the control
    horizon) plus ``warm_start``. ``solver(fun, lower, upper, seeds, step0)``
    can replace the pattern search; it must return ``(point, value, ...)``.

    Emits :class:`InfeasibleWarning` when the best input violates a constraint.
    """
    t0 = time.perf_counter()
    predictor = predictor or DynamicPredictor()
    prob = _Problem(cfg, x0, ref, predictor)
    lo = np.tile(cfg.U_min, cfg.N_c)
    hi = np.tile(cfg.U_max, cfg.N_c)

    a_grid = np.linspace(cfg.U_min[0], cfg.U_max[0], cfg.grid)
    d_grid = np.linspace(cfg.U_min[1], cfg.U_max[1], cfg.grid)
    A, D = np.meshgrid(a_grid, d_grid, indexing="ij")
    G = np.tile(np.column_stack([A.ravel(), D.ravel()]), cfg.N_c)
    Fg = prob.merit(G)
    order = np.argsort(Fg, kind="stable")
    # best grid points, plus the best cells of distinct basins
    picks = list(order[: cfg.n_seeds])
    basins = order[_grid_local_minima(Fg.reshape(cfg.grid, cfg.grid)).ravel()[order]]
    picks += [i for i in basins if i not in picks][: 2 * cfg.n_seeds]
    seeds = [G[i] for i in picks]
    if warm_start is not None:
        seeds.append(np.clip(np.asarray(warm_start, dtype=float).ravel(), lo, hi))
    step0 = np.tile([a_grid[1] - a_grid[0], d_grid[1] - d_grid[0]], cfg.N_c)
    if solver is None:
        Z, FZ, iterations, evaluations = pattern_search(
            prob.merit, lo, hi, np.array(seeds), step0, cfg.tol, cfg.max_iter, return_all=True)
        evaluations += G.shape[0]
        if cfg.N_c == 1:
            top = _distinct_best(Z, FZ, cfg.n_polish, step0)
            z, _, n_polish = _local_grid_polish(prob.merit, lo, hi, Z[top], FZ[top], step0)
            evaluations += n_polish
        else:
            z = Z[int(np.argmin(FZ))]
    else:
        z, _, *rest = solver(prob.merit, lo, hi, np.array(seeds), step0)
        iterations = rest[0] if len(rest) > 0 else 0
        evaluations = G.shape[0] + (rest[1] if len(rest) > 1 else 0)

    z = np.asarray(z, dtype=float)
    traj = prob.rollout(z)
    cost = float(prob.objective(z, traj)[0])
    viol = float(prob.violation(z, traj)[0])
    # grazing contacts of order 1e-10 m are treated as feasible
    feasible = viol <= cfg.feas_tol
    if not feasible:
        warnings.warn(f"OCP infeasible; least-violation input returned (violation {viol:.3g})",
                      InfeasibleWarning, stacklevel=2)
    return MpcSolution(
        u_opt=ControlInput(float(z[0]), float(z[1])),
        cost=cost,
        merit=cost + cfg.penalty * viol,
        violation=viol,
        predicted=traj[:, :, 0],
        feasible=feasible,
        decision=z,
        solve_stats=SolveStats(iterations, evaluations, time.perf_counter() - t0),
    )


def solve_step_kinematic(cfg: MpcConfig, x0_kin, ref: ReferenceWindow, params: VehicleParams = TABLE_I,
                         **kwargs) -> MpcSolution:
    """``solve_step`` with the kinematic predictor and 4-state weight sub-blocks."""
    return solve_step(cfg, x0_kin, ref, KinematicPredictor(params), **kwargs)

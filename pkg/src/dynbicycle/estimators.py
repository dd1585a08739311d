"""scikit-learn style wrappers.

:class:`DiscreteBicycleModel` maps batches of ``(state, input)`` rows to next
states; :class:`NMPCController` maps batches of states to control inputs.
Hyperparameters live in ``__init__`` so ``get_params``/``set_params``/``clone``
work as usual; ``fit`` only validates them and builds the fitted attributes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .integrate import StepConfig, backward_variant_map, integrate_rk4_reference, rollout
from .models import ControlInput, DomainError, DynState, VehicleParams, dyn_rhs_array
from .mpc import DynamicPredictor, KinematicPredictor, MpcConfig, build_reference_window, solve_step


class DiscreteBicycleModel(BaseEstimator):
    """One-step dynamic bicycle model as an estimator.

    ``predict(X, U)`` takes states ``(n, 6)`` in the order
    ``x, y, phi, u, v, omega`` and inputs ``(n, 2)`` as ``a, delta``; a single
    ``(n, 8)`` array with the inputs appended also works.
    """

    def __init__(self, m=1412.0, I_z=1536.7, l_f=1.06, l_r=1.85, k_f=-128916.0, k_r=-85944.0,
                 T_s=0.1, method="backward-variant"):
        self.m = m
        self.I_z = I_z
        self.l_f = l_f
        self.l_r = l_r
        self.k_f = k_f
        self.k_r = k_r
        self.T_s = T_s
        self.method = method

    def fit(self, X=None, y=None):
        self.params_ = VehicleParams(self.m, self.I_z, self.l_f, self.l_r, self.k_f, self.k_r)
        self.step_config_ = StepConfig(T_s=self.T_s, method=self.method)
        self.n_features_in_ = 6
        return self

    def _split(self, X, U):
        X = check_array(X, dtype=np.float64)
        if U is None:
            if X.shape[1] != 8:
                raise ValueError(f"expected 8 columns (state + input), got {X.shape[1]}")
            return X[:, :6], X[:, 6:]
        U = check_array(U, dtype=np.float64)
        if X.shape[1] != 6 or U.shape[1] != 2 or X.shape[0] != U.shape[0]:
            raise ValueError(f"shape mismatch: states {X.shape}, inputs {U.shape}")
        return X, U

    def predict(self, X, U=None):
        check_is_fitted(self, "params_")
        S, U = self._split(X, U)
        p, cfg = self.params_, self.step_config_
        if cfg.method == "backward-variant":
            out = backward_variant_map(p, S.T, U[:, 0], U[:, 1], cfg.T_s).T
        elif cfg.method == "forward-euler":
            if np.any(S[:, 3] <= 0):
                raise DomainError("forward Euler needs u > 0 in every row")
            out = (S.T + cfg.T_s * dyn_rhs_array(p, S.T, U[:, 0], U[:, 1], longitudinal_coupling=False)).T
        else:
            out = np.vstack([
                integrate_rk4_reference(p, DynState.from_array(s), [ControlInput(*u)], cfg).states[-1]
                for s, u in zip(S, U)
            ])
        return np.ascontiguousarray(out)

    def simulate(self, x0, inputs):
        """Roll out an input schedule from ``x0``; returns a ``Trajectory``."""
        check_is_fitted(self, "params_")
        s0 = x0 if isinstance(x0, DynState) else DynState.from_array(x0)
        return rollout(self.params_, s0, [ControlInput(*u) for u in np.atleast_2d(inputs)],
                       self.step_config_)


class NMPCController(BaseEstimator):
    """Receding-horizon controller: ``predict(states)`` returns ``(a, delta)`` rows.

    ``predictor`` selects the backward-variant dynamic model (``"dyn"``, states
    with 6 columns) or the kinematic model (``"kin"``, 4 columns).
    """

    def __init__(self, target=(30.0, 30.0), v_ref=6.0, obstacle=None, N_p=20, N_c=1, T_s=0.1,
                 D_s=8.0, predictor="dyn", vehicle=None):
        self.target = target
        self.v_ref = v_ref
        self.obstacle = obstacle
        self.N_p = N_p
        self.N_c = N_c
        self.T_s = T_s
        self.D_s = D_s
        self.predictor = predictor
        self.vehicle = vehicle

    def fit(self, X=None, y=None):
        p = self.vehicle if self.vehicle is not None else VehicleParams()
        if self.predictor == "dyn":
            self.predictor_ = DynamicPredictor(p)
        elif self.predictor == "kin":
            self.predictor_ = KinematicPredictor(p)
        else:
            raise ValueError(f"predictor must be 'dyn' or 'kin', got {self.predictor!r}")
        self.config_ = MpcConfig(N_p=self.N_p, N_c=self.N_c, T_s=self.T_s, D_s=self.D_s)
        self.n_features_in_ = self.predictor_.state_dim
        self.last_solutions_ = []
        return self

    def predict(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} state columns, got {X.shape[1]}")
        cfg = self.config_
        self.last_solutions_ = []
        out = np.empty((X.shape[0], 2))
        for i, x0 in enumerate(X):
            ref = build_reference_window(x0[:2], self.target, self.v_ref, cfg.T_s, cfg.N_p, self.obstacle)
            sol = solve_step(cfg, x0, ref, self.predictor_)
            self.last_solutions_.append(sol)
            out[i] = sol.u_opt.a, sol.u_opt.delta
        return out

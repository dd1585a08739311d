import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbicycle.integrate import StepConfig, Trajectory, rollout
from dynbicycle.models import TABLE_I, ControlInput, DomainError, DynState
from dynbicycle.stability import (
    a_hat,
    condition_sweep,
    envelope_maxima,
    jacobian_blocks,
    propagation_audit,
    spectral_norm_2x2,
)

P = TABLE_I


def _power_iteration(M, iters=500):
    G = M.T @ M
    best = 0.0
    for x in (np.array([1.0, 0.37]), np.array([-0.41, 1.0])):
        for _ in range(iters):
            y = G @ x
            n = np.linalg.norm(y)
            if n == 0.0:
                break
            x = y / n
        best = max(best, math.sqrt(max(x @ G @ x, 0.0)))
    return best


@pytest.mark.parametrize("M, expected", [
    ([[1.0, 2.0], [3.0, 4.0]], 5.4649857042),
    ([[1.0, 0.0], [0.0, 1.0]], 1.0),
    ([[3.0, 0.0], [0.0, 4.0]], 4.0),
    ([[0.0, 0.0], [0.0, 0.0]], 0.0),
])
def test_spectral_norm_examples(M, expected):
    assert spectral_norm_2x2(M) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4))
def test_spectral_norm_matches_svd(entries):
    M = np.array(entries).reshape(2, 2)
    assert spectral_norm_2x2(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("M", [[[1.0, 2.0], [3.0, 4.0]], [[0.9, -0.2], [0.05, 0.7]], [[5.0, 1.0], [0.0, -1.0]]])
def test_spectral_norm_matches_power_iteration(M):
    M = np.array(M)
    assert spectral_norm_2x2(M) == pytest.approx(_power_iteration(M), rel=1e-10)


def test_a_hat_at_standstill():
    A = a_hat(P, 0.0, 0.1)
    c = P.yaw_coupling
    np.testing.assert_allclose(A, [[0.0, -c / (P.k_f + P.k_r)], [-c / P.yaw_stiffness, 0.0]], rtol=1e-14)


def test_b_vanishes_on_straight_cruise():
    J = jacobian_blocks(P, DynState(u=7.0), ControlInput(), 0.1)
    assert J.b1 == 0.0 and J.b2 == 0.0
    assert J.full()[0].tolist() == [1.0, 0.0, 0.0]


def test_jacobian_matches_finite_differences():
    from dynbicycle.integrate import step_backward_variant

    s = DynState(u=8.0, v=0.3, omega=0.2)
    inp = ControlInput(0.0, 0.1)
    J = jacobian_blocks(P, s, inp, 0.1).full()

    def f(z):
        s1 = step_backward_variant(P, DynState(u=z[0], v=z[1], omega=z[2]), inp, 0.1)
        return np.array([s1.u, s1.v, s1.omega])

    z0 = np.array([8.0, 0.3, 0.2])
    fd = np.empty((3, 3))
    for j in range(3):
        h = 1e-6 * max(1.0, abs(z0[j]))
        e = np.zeros(3)
        e[j] = h
        fd[:, j] = (f(z0 + e) - f(z0 - e)) / (2 * h)
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_jacobian_rejects_singular_denominator():
    # m u = T (k_f + k_r) only for negative speed
    u = 0.1 * (P.k_f + P.k_r) / P.m
    with pytest.raises(DomainError):
        jacobian_blocks(P, DynState(u=u), ControlInput(), 0.1)


def test_dense_scan_agrees_with_coarse_max():
    coarse = condition_sweep(P, (0.0, 15.0), 0.01, 1000)
    dense = condition_sweep(P, (0.0, 15.0), 0.01, 100_000)
    assert dense.max_norm == pytest.approx(coarse.max_norm, rel=1e-4)
    assert dense.condition_holds and coarse.condition_holds


def test_sweep_grid_rows():
    rep = condition_sweep(P, (0.0, 15.0), 0.1, 4)
    assert [r[0] for r in rep.grid] == [0.0, 5.0, 10.0, 15.0]
    assert all(r[1] == 0.1 for r in rep.grid)
    assert rep.argmax_u in {0.0, 5.0, 10.0, 15.0}


def test_degenerate_range_is_one_point():
    rep = condition_sweep(P, (5.0, 5.0), 0.1, 1000)
    assert rep.u.tolist() == [5.0]
    assert rep.max_norm == pytest.approx(spectral_norm_2x2(a_hat(P, 5.0, 0.1)))


@pytest.mark.parametrize("rng", [(-1.0, 5.0), (5.0, 1.0)])
def test_invalid_range(rng):
    with pytest.raises(ValueError):
        condition_sweep(P, rng)


def _steer_traj(n=40, T=0.1):
    return rollout(P, DynState(u=8.0), [ControlInput(0.0, 0.2674)] * n, StepConfig(T))


def test_audit_on_step_steer():
    audit = propagation_audit(P, _steer_traj())
    assert len(audit.A_norms) == 40
    assert audit.first_row_exact
    assert audit.A_bounded and audit.b_bounded
    # submultiplicativity
    assert np.all(audit.A_prod_norms <= audit.A_norm_products * (1 + 1e-12))
    assert np.all(np.diff(audit.A_prod_norms) <= 1e-12)


def test_audit_straight_cruise_has_no_b():
    tr = rollout(P, DynState(u=6.0), [ControlInput()] * 10, StepConfig(0.1))
    audit = propagation_audit(P, tr)
    assert np.all(audit.b_acc_norms == 0.0)
    assert audit.b_star == 0.0


def test_audit_single_sample():
    one = Trajectory([0.0], np.array([[0, 0, 0, 8.0, 0.1, 0.0]]), np.array([[0.0, 0.1]]))
    with pytest.raises(ValueError):
        propagation_audit(P, one)
    audit = propagation_audit(P, one, T_s=0.1)
    assert len(audit.A_norms) == 1


def test_audit_envelope_bounds_realized_maxima():
    tr = _steer_traj()
    realized = propagation_audit(P, tr)
    env = propagation_audit(P, tr, envelope=True)
    assert env.A_star >= realized.A_star - 1e-12
    assert env.b_star >= realized.b_star
    A_star, b_star = envelope_maxima(P, 0.1)
    assert (A_star, b_star) == (env.A_star, env.b_star)


def test_audit_rejects_kinematic_trajectory():
    tr = Trajectory([0.0, 0.1], np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        propagation_audit(P, tr)

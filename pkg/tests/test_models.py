import math
import re
import warnings

import numpy as np
import pytest

from dynbicycle.models import (
    TABLE_I,
    ControlInput,
    DomainError,
    DynState,
    KinState,
    ValidationError,
    VehicleParams,
    dyn_rhs,
    kin_rhs,
    slip_angle_cg,
    tire_forces,
)


def test_table_i_defaults():
    p = VehicleParams()
    assert (p.m, p.I_z, p.l_f, p.l_r, p.k_f, p.k_r) == (1412.0, 1536.7, 1.06, 1.85, -128916.0, -85944.0)
    assert p == TABLE_I
    assert p.wheelbase == pytest.approx(2.91)
    assert p.yaw_coupling == pytest.approx(1.06 * -128916.0 - 1.85 * -85944.0)


@pytest.mark.parametrize("field, value, message", [
    ("m", -1.0, "m > 0"),
    ("I_z", 0.0, "I_z > 0"),
    ("l_r", -0.1, "l_r > 0"),
    ("k_f", 5.0, "k_f < 0"),
    ("k_r", 0.0, "k_r < 0"),
    ("m", math.nan, "m must be finite"),
])
def test_params_validation(field, value, message):
    with pytest.raises(ValidationError, match=re.escape(message)):
        VehicleParams(**{field: value})


def test_control_input_bounds():
    with pytest.raises(ValidationError):
        ControlInput(0.0, 1.6)
    with pytest.raises(ValidationError):
        ControlInput(math.inf, 0.0)
    with pytest.warns(RuntimeWarning):
        ControlInput(0.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ControlInput(2.0, math.pi / 4)


def test_state_roundtrip():
    s = DynState(1, 2, 3, 4, 5, 6)
    assert DynState.from_array(s.as_array()) == s
    k = KinState(1, 2, 3, 4)
    assert KinState.from_array(k.as_array()) == k
    with pytest.raises(ValueError):
        DynState.from_array([1, 2, 3])
    assert not DynState(u=math.nan).is_finite()


def test_tire_forces_linear():
    p = TABLE_I
    s = DynState(u=8.0, v=0.3, omega=0.2)
    f = tire_forces(p, s, ControlInput(0.0, 0.1))
    alpha_f = (0.3 + 1.06 * 0.2) / 8.0 - 0.1
    alpha_r = (0.3 - 1.85 * 0.2) / 8.0
    assert f.alpha_f == pytest.approx(alpha_f)
    assert f.F_Y1 == pytest.approx(p.k_f * alpha_f)
    assert f.F_Y2 == pytest.approx(p.k_r * alpha_r)


def test_tire_forces_undefined_at_standstill():
    with pytest.raises(DomainError):
        tire_forces(TABLE_I, DynState(u=0.0), ControlInput())
    with pytest.raises(DomainError):
        dyn_rhs(TABLE_I, DynState(u=-1.0), ControlInput())


def _rhs_by_hand(p, s, a, d, full):
    F1 = p.k_f * ((s.v + p.l_f * s.omega) / s.u - d)
    F2 = p.k_r * (s.v - p.l_r * s.omega) / s.u
    c, sn = (math.cos(d), math.sin(d)) if full else (1.0, 0.0)
    return [
        s.u * math.cos(s.phi) - s.v * math.sin(s.phi),
        s.v * math.cos(s.phi) + s.u * math.sin(s.phi),
        s.omega,
        a + s.v * s.omega - F1 * sn / p.m,
        -s.u * s.omega + (F1 * c + F2) / p.m,
        (p.l_f * F1 * c - p.l_r * F2) / p.I_z,
    ]


@pytest.mark.parametrize("full", [False, True])
def test_dyn_rhs_matches_hand_expansion(full):
    s = DynState(1.0, -2.0, 0.4, 7.0, 0.5, -0.3)
    got = dyn_rhs(TABLE_I, s, ControlInput(0.7, 0.2), full_trig=full)
    np.testing.assert_allclose(got, _rhs_by_hand(TABLE_I, s, 0.7, 0.2, full), rtol=1e-13)


def test_longitudinal_coupling_switch():
    s = DynState(u=7.0, v=0.5, omega=-0.3)
    with_c = dyn_rhs(TABLE_I, s, ControlInput(0.7, 0.2))
    without = dyn_rhs(TABLE_I, s, ControlInput(0.7, 0.2), longitudinal_coupling=False)
    assert with_c[3] - without[3] == pytest.approx(0.5 * -0.3)
    assert without[3] == 0.7


def test_kinematic_rhs():
    p = TABLE_I
    s = KinState(0.0, 0.0, 6.0, 0.3)
    d = 0.2674
    beta = math.atan(math.tan(d) * p.l_r / (p.l_f + p.l_r))
    assert slip_angle_cg(p, d) == pytest.approx(beta)
    np.testing.assert_allclose(kin_rhs(p, s, ControlInput(1.0, d)),
                               [6 * math.cos(0.3 + beta), 6 * math.sin(0.3 + beta), 1.0, 6 / p.l_r * math.sin(beta)])


def test_kinematic_rhs_singular_steering():
    with pytest.warns(RuntimeWarning):
        inp = ControlInput(0.0, math.pi / 2)
    with pytest.raises(DomainError):
        kin_rhs(TABLE_I, KinState(u=1.0), inp)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darlab.cost import (
    cost, cost_curve, derivative_sign_rule, nearest_divisor, s_star, sweep, sweep_report,
    verify_minimizer, write_cost_csv,
)
from darlab.errors import ContractError, VerificationError


def test_cost_values():
    for a in (0.1, 0.5, 0.9):
        assert cost(1, 56, a) == pytest.approx(math.log(57), abs=1e-12)
    assert math.log(57) == pytest.approx(4.04305, abs=5e-6)
    assert cost(4, 56, 0.5) == pytest.approx(3.58352, abs=5e-6)
    assert cost(4, 56, 0.5) == pytest.approx(math.log(18) + 0.5 * math.log(4), abs=1e-12)


def test_cost_at_symmetry_point_small_alpha():
    L = 49.0
    assert cost(math.sqrt(L), L, 1e-9) == pytest.approx(math.log(2 * math.sqrt(L)), abs=1e-8)


@pytest.mark.parametrize("args", [(0, 56, 0.5), (-1, 56, 0.5), (4, 0, 0.5), (4, 56, 0.0), (4, 56, 1.0)])
def test_cost_domain(args):
    with pytest.raises(ContractError):
        cost(*args)


def test_s_star_values_and_limits():
    assert s_star(56, 0.4) == pytest.approx(math.sqrt(24), abs=1e-12)
    assert s_star(56, 0.4) == pytest.approx(4.89898, abs=5e-6)
    assert s_star(56, 0.5) == pytest.approx(4.3205, abs=5e-5)
    assert s_star(56, 1e-12) == pytest.approx(math.sqrt(56), rel=1e-9)
    assert s_star(56, 1 - 1e-12) < 1e-5
    # formula at alpha=0.7 is below the 3.7 sometimes quoted for this range
    assert s_star(56, 0.7) == pytest.approx(3.1435, abs=5e-4)
    with pytest.raises(ContractError):
        s_star(56, 1.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(1, 1e4), st.floats(0.01, 0.99))
def test_s_star_identity(L, a):
    s = s_star(L, a)
    assert abs(s * s * (1 + a) - L * (1 - a)) <= 1e-12 * max(1.0, L)
    assert 0 < s < math.sqrt(L)
    assert s_star(2 * L, a) == pytest.approx(math.sqrt(2) * s, abs=1e-9)


def test_s_star_is_a_stationary_point():
    # independent oracle: derivative by central differences vanishes at S*
    for L, a in [(56, 0.5), (112, 0.3), (16, 0.8)]:
        s, h = s_star(L, a), 1e-6
        deriv = (cost(s + h, L, a) - cost(s - h, L, a)) / (2 * h)
        assert abs(deriv) < 1e-8


def test_verify_example():
    rep = verify_minimizer(56, 0.5, 0.01)
    assert abs(rep.grid_argmin - math.sqrt(56 / 3)) <= 0.01
    assert rep.sign_changes == 1


def test_verify_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        verify_minimizer(float(rng.uniform(8, 512)), float(rng.uniform(0.05, 0.95)), 0.01)


def test_strict_decrease_before_minimizer():
    c = cost_curve(56, 0.5, 0.01)
    below = [v for S, v in c.samples if S < c.s_star]
    assert all(a > b for a, b in zip(below, below[1:]))
    above = [v for S, v in c.samples if S > c.s_star]
    assert all(a < b for a, b in zip(above, above[1:]))


def test_verification_error_names_offender(monkeypatch):
    import darlab.cost as cm
    monkeypatch.setattr(cm, "s_star", lambda L, a: 1.5)
    with pytest.raises(VerificationError, match="S\\*=1.5"):
        cm.verify_minimizer(56, 0.5)


def test_sign_rule_matches_derivative_sign():
    S = np.linspace(0.5, 56, 500)
    for a in (0.2, 0.5, 0.8):
        h = 1e-6
        num = (cost(S + h, 56, a) - cost(S - h, 56, a)) / (2 * h)
        rule = derivative_sign_rule(S, 56, a)
        far = np.abs(S - s_star(56, a)) > 1e-3
        assert np.array_equal(np.sign(num[far]), np.sign(rule[far]))


def test_u_shape_at_56():
    for a in np.linspace(0.4, 0.7, 31):
        assert cost(4, 56, a) < cost(1, 56, a)
        assert cost(4, 56, a) < cost(8, 56, a)


def test_integer_recommendation():
    assert nearest_divisor(56, s_star(56, 0.5)) == 4
    assert nearest_divisor(12, 3.5) == 3  # tie goes to the smaller divisor
    rows = sweep([56], [0.5])
    assert rows[0].s_int == 4


def test_csv_outputs(tmp_path):
    write_cost_csv(str(tmp_path / "cost.csv"), cost_curve(8, 0.5, 0.5))
    lines = (tmp_path / "cost.csv").read_text().splitlines()
    assert lines[0] == "S,cost" and len(lines) == 1 + 16
    rows = sweep_report(str(tmp_path), Ls=(8, 56), alphas=[0.4, 0.5], svg=False)
    text = (tmp_path / "sstar.csv").read_text().splitlines()
    assert text[0] == "L,alpha,s_star,s_int" and len(text) == 1 + len(rows) == 5

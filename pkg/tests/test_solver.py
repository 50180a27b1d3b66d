import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_ldp.errors import BlowUpError, ValidationError
from spde_ldp.grid_noise import Control, GridSpec, sample_sheet
from spde_ldp.models import preset
from spde_ldp.solver import (Scheme, SolveConfig, Trajectory, c0l2_distance, l2_norm, march, solve,
                             solve_skeleton, sup_l2)


def heat_exact_discrete(grid, k=1):
    # one grid sine mode is damped by 1/(1 + dt mu_k) per step
    mu = 4 / grid.dx ** 2 * math.sin(k * math.pi * grid.dx / 2) ** 2
    r = 1 / (1 + grid.dt * mu)
    return np.outer(r ** np.arange(grid.nt + 1), np.sin(k * math.pi * grid.x))


@pytest.mark.parametrize("k", [1, 3])
def test_heat_matches_discrete_eigen_solution(k):
    g = GridSpec(31, 50)
    traj = solve_skeleton(np.sin(k * np.pi * g.x), preset("linear_heat"), g)
    np.testing.assert_allclose(traj.values, heat_exact_discrete(g, k), atol=1e-13)


def test_heat_converges_to_analytic_solution():
    errs = []
    for nx, nt in ((15, 25), (31, 100), (63, 400)):
        g = GridSpec(nx, nt)
        traj = solve_skeleton(np.sin(np.pi * g.x), preset("linear_heat"), g)
        exact = np.outer(np.exp(-np.pi ** 2 * g.t), np.sin(np.pi * g.x))
        errs.append(np.max(np.abs(traj.values - exact)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_constant_control_matches_mode_recursion():
    # forcing sqrt2 sin(pi x) excites only the first grid mode
    g = GridSpec(31, 40)
    v = Control.from_function(g, lambda t, x: np.sqrt(2) * np.sin(np.pi * x))
    traj = solve_skeleton(np.zeros(g.nx), preset("linear_heat"), g, v)
    mu = 4 / g.dx ** 2 * math.sin(math.pi * g.dx / 2) ** 2
    a = 0.0
    for _ in range(g.nt):
        a = (a + g.dt * math.sqrt(2)) / (1 + g.dt * mu)
    np.testing.assert_allclose(traj.terminal, a * np.sin(np.pi * g.x), atol=1e-13)


def test_ddx_transpose_is_adjoint():
    g = GridSpec(17, 3)
    sch = Scheme(g, preset("burgers"))
    rng = np.random.default_rng(0)
    u, p = rng.standard_normal(g.nx), rng.standard_normal(g.nx)
    assert np.dot(sch.ddx(u, 0.0, 0.0), p) == pytest.approx(np.dot(u, sch.ddx_T(p)), rel=1e-12)


def test_solve_A_inverts_operator():
    g = GridSpec(20, 7)
    sch = Scheme(g, preset("linear_heat"))
    rhs = np.random.default_rng(2).standard_normal((3, g.nx))
    u = sch.solve_A(rhs)
    np.testing.assert_allclose(u - g.dt * sch.laplacian(u), rhs, atol=1e-12)


def test_residual_inverts_step():
    g = GridSpec(15, 10)
    c = preset("reaction_diffusion")
    sch = Scheme(g, c)
    U = np.sin(np.pi * g.x)
    v = np.cos(3 * g.x)
    nxt = sch.step(2, U, v)
    r, s = sch.residual(2, U, nxt)
    np.testing.assert_allclose(r / s, v, atol=1e-10)


@pytest.mark.parametrize("name", ["burgers", "reaction_diffusion"])
def test_noise_reproducible_by_seed(name):
    g = GridSpec(15, 30)
    eta = np.sin(np.pi * g.x)
    cfg = SolveConfig(0.1)
    a = solve(eta, preset(name), g, cfg, sheet=sample_sheet(g, 5))
    b = solve(eta, preset(name), g, cfg, sheet=sample_sheet(g, 5))
    assert a.content_hash() == b.content_hash()
    c = solve(eta, preset(name), g, cfg, sheet=sample_sheet(g, 6))
    assert a.content_hash() != c.content_hash()


def test_batched_march_matches_single_solves():
    g = GridSpec(15, 20)
    c = preset("burgers")
    eta = np.sin(np.pi * g.x)
    sheets = [sample_sheet(g, s) for s in range(4)]
    batch = march(eta, c, g, SolveConfig(0.3), increments=np.stack([s.increments for s in sheets]))
    for k, sh in enumerate(sheets):
        single = solve(eta, c, g, SolveConfig(0.3), sheet=sh)
        np.testing.assert_array_equal(batch["terminal"][k], single.terminal)
        assert batch["sup_l2"][k] == pytest.approx(single.sup_l2, rel=1e-15)


def test_burgers_energy_decreases():
    g = GridSpec(63, 200)
    traj = solve_skeleton(np.sin(np.pi * g.x), preset("burgers"), g)
    norms = l2_norm(traj.values, g.dx)
    assert np.all(np.diff(norms) <= 1e-10)


def test_truncation_changes_large_states_only():
    g = GridSpec(15, 20)
    c = preset("burgers")
    small = 0.1 * np.sin(np.pi * g.x)
    a = solve(small, c, g, SolveConfig(0.0, truncation_level=5))
    b = solve(small, c, g, SolveConfig(0.0))
    np.testing.assert_array_equal(a.values, b.values)
    big = 20 * np.sin(np.pi * g.x)
    a = solve(big, c, g, SolveConfig(0.0, truncation_level=1))
    b = solve(big, c, g, SolveConfig(0.0))
    assert not np.allclose(a.values, b.values)


def test_blowup_is_reported():
    g = GridSpec(15, 10)
    with pytest.raises(BlowUpError) as info:
        solve(1e5 * np.sin(np.pi * g.x), preset("burgers"), g, SolveConfig(0.0))
    assert info.value.blowup_step >= 1
    res = march(np.stack([np.sin(np.pi * g.x), 1e5 * np.sin(np.pi * g.x)]), preset("burgers"), g,
                SolveConfig(0.0))
    assert list(res["blowup_step"] >= 0) == [False, True]
    assert np.all(np.isfinite(res["terminal"]))


def test_validation():
    g = GridSpec(7, 5)
    c = preset("linear_heat")
    with pytest.raises(ValidationError):
        solve(np.zeros(6), c, g, SolveConfig(0.0))
    with pytest.raises(ValidationError):
        solve(np.zeros(7), c, g, SolveConfig(0.1))
    with pytest.raises(ValidationError):
        solve(np.zeros(7), c, g, SolveConfig(0.1), sheet=sample_sheet(GridSpec(7, 6), 0))
    with pytest.raises(ValidationError):
        solve_skeleton(np.zeros(7), c, g, Control.zeros(GridSpec(7, 6)))
    with pytest.raises(ValidationError):
        SolveConfig(-1.0)
    with pytest.raises(ValidationError):
        SolveConfig(0.0, truncation_level=0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.0, 3.0))
def test_linear_heat_is_linear_and_contractive(eta, scale):
    g = GridSpec(9, 12)
    c = preset("linear_heat")
    eta = np.array(eta)
    a = solve_skeleton(eta, c, g)
    b = solve_skeleton(scale * eta, c, g)
    np.testing.assert_allclose(b.values, scale * a.values, atol=1e-10)
    norms = l2_norm(a.values, g.dx)
    assert np.all(np.diff(norms) <= 1e-12)


def test_distance_helpers():
    g = GridSpec(7, 4)
    a = Trajectory.from_values(g, np.zeros((5, 7)))
    b = Trajectory.from_values(g, np.ones((5, 7)))
    assert c0l2_distance(a, b) == pytest.approx(math.sqrt(7 * g.dx))
    assert sup_l2(b) == pytest.approx(math.sqrt(7 * g.dx))
    with pytest.raises(ValidationError):
        c0l2_distance(a, Trajectory.from_values(GridSpec(7, 5), np.zeros((6, 7))))


def test_trajectory_io_round_trip(tmp_path):
    g = GridSpec(5, 6, 0.5)
    traj = solve_skeleton(np.sin(np.pi * g.x), preset("burgers"), g)
    back = Trajectory.from_csv(traj.to_csv(), T=0.5)
    assert back.grid == g and back.values.tobytes() == traj.values.tobytes()
    man = json.loads(traj.manifest_json(seed=3, preset="burgers"))
    assert man["seed"] == 3 and man["grid"]["nx"] == 5
    with pytest.raises(ValueError):
        traj.values[0, 0] = 1.0

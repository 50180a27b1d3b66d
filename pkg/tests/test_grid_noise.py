import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_ldp.errors import ValidationError
from spde_ldp.grid_noise import (Control, GridSpec, control_norm_sq, derive_seed, int_v, load_field,
                                 oscillatory_family, refine_sheets, sample_sheet, save_field)


def test_grid_geometry():
    g = GridSpec(7, 10, 2.0)
    assert g.dx == 1 / 8 and g.dt == 0.2
    np.testing.assert_allclose(g.x, np.arange(1, 8) / 8)
    assert g.t[0] == 0 and g.t[-1] == 2.0 and g.t.size == 11
    np.testing.assert_allclose(g.t_mid, (np.arange(10) + 0.5) * 0.2)
    assert g.cell_shape == (10, 7)
    r = g.refined()
    assert r.dx == g.dx / 2 and r.dt == g.dt / 4


@pytest.mark.parametrize("args", [(0, 10, 1.0), (5, 0, 1.0), (5, 10, 0.0), (5, 10, -1.0)])
def test_grid_rejects_bad_sizes(args):
    with pytest.raises(ValidationError):
        GridSpec(*args)


def test_sheet_is_reproducible_and_has_cell_variance():
    g = GridSpec(63, 400)
    a = sample_sheet(g, 11)
    b = sample_sheet(g, 11)
    assert a.increments.tobytes() == b.increments.tobytes()
    assert not np.array_equal(a.increments, sample_sheet(g, 12).increments)
    var = a.increments.var()
    # 25200 draws: relative SE of a variance estimate is sqrt(2/n) ~ 0.9%
    assert var == pytest.approx(g.dt * g.dx, rel=0.04)
    assert abs(a.increments.mean()) < 4 * np.sqrt(g.dt * g.dx / a.increments.size)
    with pytest.raises(ValueError):
        a.increments[0, 0] = 1.0


def test_derived_seeds_differ_and_repeat():
    seeds = {derive_seed(5, k) for k in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(5, 3) == derive_seed(5, 3)
    assert derive_seed(5, 3) != derive_seed(6, 3)


def test_refined_sheets_are_coupled():
    g = GridSpec(31, 32)
    levels = refine_sheets(g, 1, seed=4)
    assert [lv[0] for lv in levels] == [g, g.refined()]
    (gc, sc), (gf, sf) = levels
    assert sc.increments.var() == pytest.approx(gc.dt * gc.dx, rel=0.15)
    assert sf.increments.var() == pytest.approx(gf.dt * gf.dx, rel=0.08)
    # the fine node 2i+1 cell (half as wide) sits in the middle of coarse node i
    fine_centre = sf.increments.reshape(gc.nt, 4, gf.nx).sum(axis=1)[:, 1::2]
    corr = np.corrcoef(sc.increments.ravel(), fine_centre.ravel())[0, 1]
    assert corr == pytest.approx(1 / np.sqrt(2), abs=0.1)


def test_refine_sheets_is_reproducible():
    a = refine_sheets(GridSpec(7, 4), 2, seed=1)
    b = refine_sheets(GridSpec(7, 4), 2, seed=1)
    assert all(x[1].increments.tobytes() == y[1].increments.tobytes() for x, y in zip(a, b))
    with pytest.raises(ValidationError):
        refine_sheets(GridSpec(7, 4), 1, seed=1, space=3)


def test_control_norm_of_constant_counts_interior_cells():
    g = GridSpec(9, 20)
    v = Control(g, np.ones(g.cell_shape))
    # nx cells of width dx cover 1 - dx of the unit interval
    assert v.norm_sq == pytest.approx(1 - g.dx, rel=1e-14)
    assert control_norm_sq(v, g) == v.norm_sq
    assert v.in_ball(1.0) and not v.in_ball(0.5)


def test_control_arithmetic_and_immutability():
    g = GridSpec(5, 6)
    a = Control.from_function(g, lambda t, x: t + x)
    b = 2 * a
    np.testing.assert_allclose((a + b).values, 3 * a.values)
    assert b.norm_sq == pytest.approx(4 * a.norm_sq)
    with pytest.raises(ValueError):
        a.values[0, 0] = 9.0
    with pytest.raises(ValidationError):
        a + Control.zeros(GridSpec(5, 7))
    with pytest.raises(ValidationError):
        Control(g, np.zeros((6, 4)))


def test_int_v_is_double_integral():
    g = GridSpec(31, 40)
    v = Control.from_function(g, lambda t, x: np.ones_like(t))
    iv = int_v(v, g)
    # integral of 1 over [0, t_{j+1}] x [0, (i+1) dx]
    expected = np.outer(g.t[1:], (np.arange(g.nx) + 1) * g.dx)
    np.testing.assert_allclose(iv, expected, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.floats(0.1, 3.0))
def test_oscillatory_family_norm_and_weak_limit(n, amp):
    g = GridSpec(15, 256)
    v = Control.from_function(g, lambda t, x: np.sin(np.pi * x))
    w = oscillatory_family(v, n, amp)
    # averages of the perturbation against a smooth test function vanish like 1/n
    test = np.cos(np.pi * g.t_mid)[:, None] * np.ones(g.nx)
    pairing = np.sum((w.values - v.values) * test) * g.dx * g.dt
    assert abs(pairing) <= amp * 2.0 / n + 1e-9
    assert np.isfinite(w.norm_sq)


def test_oscillatory_family_rejects_bad_n():
    v = Control.zeros(GridSpec(3, 4))
    for n in (0, 1.5, -2):
        with pytest.raises(ValidationError):
            oscillatory_family(v, n, 1.0)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
@pytest.mark.parametrize("seed", [None, 0, 2**64 - 1])
def test_field_round_trip(tmp_path, suffix, seed):
    g = GridSpec(6, 5, 0.7)
    vals = np.random.default_rng(3).standard_normal((g.nt, g.nx)) * 1e3
    path = tmp_path / f"field{suffix}"
    save_field(path, g, vals, seed)
    g2, v2, s2 = load_field(path)
    assert g2 == g and s2 == seed
    assert v2.tobytes() == vals.tobytes()


def test_field_rejects_bad_input(tmp_path):
    g = GridSpec(4, 3)
    with pytest.raises(ValidationError):
        save_field(tmp_path / "x.csv", g, np.zeros((3, 5)))
    (tmp_path / "junk.bin").write_bytes(b"0" * 64)
    with pytest.raises(ValidationError):
        load_field(tmp_path / "junk.bin")

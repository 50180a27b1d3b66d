r"""
Semi-implicit finite-difference solver for the controlled semilinear SPDE

.. math::

    \partial_t U = \partial_x^2 U + \partial_x g(t,x,U) + f(t,x,U)
                   + \sigma(t,x,U)\,v + \sqrt{\varepsilon}\,\sigma(t,x,U)\,\dot W

on :math:`[0,T]\times[0,1]` with zero Dirichlet data. One step reads

.. math::

    (I - \Delta t\,\Delta_h) U^{j+1} = U^j + \Delta t\,[f + \sigma v_j + D_h g]
        + \sqrt{\varepsilon}\,\sigma\,\Delta W_j/\Delta x,

with every coefficient frozen at :math:`(t_j, U^j)`. ``epsilon = 0`` gives the
skeleton equation, ``v = None`` the uncontrolled equation.
"""
import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import BlowUpError, ValidationError
from .grid_noise import Control, GridSpec, SheetIncrements, save_field

__all__ = [
    "SolveConfig",
    "Trajectory",
    "Scheme",
    "solve",
    "solve_skeleton",
    "march",
    "c0l2_distance",
    "sup_l2",
    "l2_norm",
]


@dataclass(frozen=True)
class SolveConfig:
    """``truncation_level=None`` means no clipping of ``f`` and ``g``."""

    epsilon: float = 0.0
    truncation_level: int = None
    max_sup_l2: float = 1e6

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValidationError("epsilon must be >= 0")
        if self.truncation_level is not None and self.truncation_level < 1:
            raise ValidationError("truncation_level must be >= 1")
        if not self.max_sup_l2 > 0:
            raise ValidationError("max_sup_l2 must be positive")


def l2_norm(u, dx):
    """Discrete ``L2(0,1)`` norm along the last axis."""
    return np.sqrt(np.sum(u * u, axis=-1) * dx)


@dataclass(frozen=True)
class Trajectory:
    """Solution values ``U(t_j, x_i)``, ``j = 0..nt``; boundary zeros are implicit."""

    grid: GridSpec
    values: np.ndarray
    sup_l2: float
    blowup_step: int = None

    def __post_init__(self):
        if self.values.shape != (self.grid.nt + 1, self.grid.nx):
            raise ValidationError(f"trajectory shape {self.values.shape} does not match grid")
        self.values.setflags(write=False)

    @classmethod
    def from_values(cls, grid, values):
        values = np.array(values, dtype=float)
        return cls(grid, values, float(np.max(l2_norm(values, grid.dx))))

    @property
    def terminal(self):
        return self.values[-1]

    def to_csv(self):
        """Long format ``t,x,value``, one line per interior node and time level."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "value"])
        for tj, row in zip(self.grid.t, self.values):
            for xi, u in zip(self.grid.x, row):
                w.writerow([repr(float(tj)), repr(float(xi)), repr(float(u))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, T=None):
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["t", "x", "value"]:
            raise ValidationError("trajectory CSV must start with t,x,value")
        data = np.array([[float(a) for a in r] for r in rows[1:]])
        ts = np.unique(data[:, 0])
        nx = data.shape[0] // ts.size
        grid = GridSpec(nx, ts.size - 1, float(ts[-1]) if T is None else T)
        return cls.from_values(grid, data[:, 2].reshape(ts.size, nx))

    def content_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes()).hexdigest()

    def save(self, path, seed=None):
        save_field(path, self.grid, self.values, seed)

    def manifest(self, config=None, seed=None, preset=None):
        return {
            "grid": asdict(self.grid),
            "config": asdict(config) if config is not None else None,
            "seed": seed,
            "preset": preset,
            "sha256": self.content_hash(),
        }

    def manifest_json(self, **kw):
        return json.dumps(self.manifest(**kw), sort_keys=True)


def _truncated(values_at, r, n):
    """Cutoff: identity for ``|r| <= n``, zero for ``|r| >= n+1``, linear in between."""
    if n is None:
        return values_at(r)
    a = np.abs(r)
    inner = a <= n
    if np.all(inner):
        return values_at(r)
    out = values_at(np.where(inner, r, np.sign(r) * n))
    weight = np.clip(n + 1 - a, 0.0, 1.0)
    return np.where(inner, out, weight * out)


class Scheme:
    """Precomputed operators of the semi-implicit step on one grid."""

    def __init__(self, grid, coeffs):
        self.grid = grid
        self.c = coeffs
        nx, dx, dt = grid.nx, grid.dx, grid.dt
        lam = dt / dx ** 2
        # upper banded form of the SPD matrix I - dt*Lap_h
        ab = np.empty((2, nx))
        ab[0, 0] = 0.0
        ab[0, 1:] = -lam
        ab[1, :] = 1.0 + 2.0 * lam
        self._chol = cholesky_banded(ab)
        self.x = grid.x

    def solve_A(self, rhs):
        """Apply ``(I - dt Lap_h)^{-1}`` along the last axis."""
        if rhs.ndim == 1:
            return cho_solve_banded((self._chol, False), rhs)
        flat = rhs.reshape(-1, rhs.shape[-1])
        return cho_solve_banded((self._chol, False), flat.T).T.reshape(rhs.shape)

    def laplacian(self, u):
        """Second difference with zero boundary values."""
        p = np.pad(u, [(0, 0)] * (u.ndim - 1) + [(1, 1)])
        return (p[..., 2:] - 2 * u + p[..., :-2]) / self.grid.dx ** 2

    def ddx(self, g_in, g_left, g_right):
        """Centred difference of a nodal field with given boundary values."""
        shape = g_in.shape[:-1] + (1,)
        p = np.concatenate([np.broadcast_to(g_left, shape), g_in, np.broadcast_to(g_right, shape)], axis=-1)
        return (p[..., 2:] - p[..., :-2]) / (2.0 * self.grid.dx)

    def ddx_T(self, p):
        """Transpose of :meth:`ddx` restricted to the interior unknowns."""
        z = np.pad(p, [(0, 0)] * (p.ndim - 1) + [(1, 1)])
        return -(z[..., 2:] - z[..., :-2]) / (2.0 * self.grid.dx)

    def flux(self, j, U, n=None):
        """``(f, D_h g, sigma)`` at time level ``j`` and state ``U``."""
        c, t, x = self.c, j * self.grid.dt, self.x
        f = _truncated(lambda r: c.f(t, x, r), U, n)
        g = _truncated(lambda r: c.g(t, x, r), U, n)
        zero = np.zeros(1)
        dg = self.ddx(g, c.g(t, 0.0, zero), c.g(t, 1.0, zero))
        return f, dg, c.sigma(t, x, U)

    def step(self, j, U, v_j=None, dW_j=None, epsilon=0.0, n=None):
        dt, dx = self.grid.dt, self.grid.dx
        f, dg, s = self.flux(j, U, n)
        rhs = U + dt * (f + dg)
        if v_j is not None:
            rhs = rhs + dt * s * v_j
        if epsilon > 0:
            rhs = rhs + np.sqrt(epsilon) * s * dW_j / dx
        return self.solve_A(rhs)

    def residual(self, j, U_now, U_next):
        """``sigma * v`` needed to go from ``U_now`` to ``U_next`` in one noiseless step."""
        f, dg, s = self.flux(j, U_now)
        r = (U_next - U_now) / self.grid.dt - self.laplacian(U_next) - dg - f
        return r, s


def _check_eta(eta, grid):
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1:] != (grid.nx,):
        raise ValidationError(f"initial condition has {eta.shape[-1:]} points, grid has {grid.nx}")
    return eta


def _check_control(v, grid):
    if v is None:
        return None
    if not isinstance(v, Control):
        raise ValidationError("v must be a Control")
    if v.grid != grid:
        raise ValidationError("control grid does not match")
    return v.values


def march(eta, coeffs, grid, cfg, v=None, increments=None, store=False, scheme=None):
    """Advance a batch of solutions; the core of :func:`solve`.

    Parameters
    ----------
    eta : array, shape (..., nx)
        Initial data, one row per batch member (a 1-D array is broadcast).
    increments : array, shape (batch, nt, nx) or (nt, nx), optional
        Sheet increments; required when ``cfg.epsilon > 0``.
    store : bool
        Keep every time level (memory ``(nt+1) x batch x nx``).

    Returns
    -------
    dict
        ``terminal``, ``sup_l2``, ``blowup_step`` (``-1`` when none) and, with
        ``store``, ``values``.
    """
    eta = _check_eta(eta, grid)
    vals = _check_control(v, grid)
    eps = cfg.epsilon
    if eps > 0:
        if increments is None:
            raise ValidationError("epsilon > 0 needs sheet increments")
        increments = np.asarray(increments)
        if increments.shape[-2:] != grid.cell_shape:
            raise ValidationError("increments do not match grid")
        batch_shape = increments.shape[:-2]
    else:
        batch_shape = eta.shape[:-1]
    U = np.broadcast_to(eta, batch_shape + (grid.nx,)).astype(float)
    sch = scheme or Scheme(grid, coeffs)
    dx = grid.dx
    norms = l2_norm(U, dx)
    sup = norms.copy()
    blow = np.full(batch_shape, -1, dtype=np.int64)
    rows = [U] if store else None
    for j in range(grid.nt):
        dW = increments[..., j, :] if eps > 0 else None
        U = sch.step(j, U, None if vals is None else vals[j], dW, eps, cfg.truncation_level)
        norms = l2_norm(U, dx)
        bad = ~np.isfinite(norms) | (norms > cfg.max_sup_l2)
        if np.any(bad):
            fresh = bad & (blow < 0)
            blow = np.where(fresh, j + 1, blow)
            # freeze blown-up members at zero so they cannot poison the batch
            U = np.where(bad[..., None], 0.0, U)
            norms = np.where(bad, 0.0, norms)
        sup = np.maximum(sup, norms)
        if store:
            rows.append(U)
    out = {"terminal": U, "sup_l2": sup, "blowup_step": blow}
    if store:
        out["values"] = np.stack(rows, axis=-2)
    return out


def solve(eta, coeffs, grid, cfg, v=None, sheet=None):
    """Time-step the (controlled) SPDE from ``eta``.

    Raises
    ------
    ValidationError
        Shape mismatches, or ``epsilon > 0`` without a sheet.
    BlowUpError
        A non-finite state or ``|U|_2 > cfg.max_sup_l2``.
    """
    increments = None
    if cfg.epsilon > 0:
        if sheet is None:
            raise ValidationError("epsilon > 0 needs a SheetIncrements")
        if not isinstance(sheet, SheetIncrements) or sheet.grid != grid:
            raise ValidationError("sheet grid does not match")
        increments = sheet.increments
    eta = _check_eta(eta, grid)
    if eta.ndim != 1:
        raise ValidationError("solve takes a single initial condition")
    res = march(eta, coeffs, grid, cfg, v, increments, store=True)
    step = int(res["blowup_step"])
    if step >= 0:
        raise BlowUpError(step, float("inf"))
    return Trajectory(grid, res["values"], float(res["sup_l2"]))


_SKELETON = SolveConfig(epsilon=0.0)


def solve_skeleton(eta, coeffs, grid, v=None, max_sup_l2=1e6):
    """Zero-noise controlled equation; ``v=None`` is the zero control."""
    cfg = _SKELETON if max_sup_l2 == 1e6 else SolveConfig(0.0, None, max_sup_l2)
    return solve(eta, coeffs, grid, cfg, v=v)


def c0l2_distance(a, b):
    """``max_j |a(t_j) - b(t_j)|_2``."""
    if a.grid != b.grid:
        raise ValidationError("trajectories live on different grids")
    return float(np.max(l2_norm(a.values - b.values, a.grid.dx)))


def sup_l2(a):
    """``max_j |a(t_j)|_2``."""
    return float(np.max(l2_norm(np.asarray(a.values), a.grid.dx)))

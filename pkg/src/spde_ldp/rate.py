"""
Rate functional: direct evaluation by inverting the skeleton scheme, and
minimum-action search over controls with exact discrete adjoint gradients.

The action of a control is ``0.5 * ||v||^2``. Targets are imposed by a
quadratic penalty whose weight is increased until the constraint holds.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import UnsupportedDegeneracy, ValidationError
from .grid_noise import Control
from .solver import Scheme, Trajectory, solve_skeleton

__all__ = [
    "RateResult",
    "TargetSpec",
    "evaluate_rate_direct",
    "objective",
    "adjoint_gradient",
    "minimize_rate",
]


@dataclass
class RateResult:
    value: float
    control: Control
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    penalty_weight: float = 0.0
    violation: float = 0.0
    history: list = field(default_factory=list)

    CSV_HEADER = ("value", "iterations", "grad_norm", "converged")

    def csv_row(self):
        return [repr(float(self.value)), int(self.iterations), repr(float(self.grad_norm)),
                str(bool(self.converged)).lower()]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()


@dataclass(frozen=True)
class TargetSpec:
    """Terminal target for the skeleton.

    ``terminal_projection``: ``<h(T), profile> >= level`` (one-sided).
    ``terminal_field``: ``h(T) = profile`` in ``L2``.
    The penalty is ``0.5 * violation^2`` scaled by ``penalty_weight``.
    """

    kind: str
    profile: np.ndarray
    level: float = 0.0
    penalty_weight: float = 10.0
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("terminal_projection", "terminal_field"):
            raise ValidationError(f"unknown target kind {self.kind!r}")
        if not self.penalty_weight > 0:
            raise ValidationError("penalty_weight must be positive")
        if not np.isfinite(self.level):
            raise ValidationError("level must be finite")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        object.__setattr__(self, "profile", np.asarray(self.profile, dtype=float))

    def check_grid(self, grid):
        if self.profile.shape != (grid.nx,):
            raise ValidationError("target profile does not match grid")

    def violation(self, hT, dx):
        if self.kind == "terminal_projection":
            return max(0.0, self.level - float(np.dot(hT, self.profile) * dx))
        return float(np.sqrt(np.sum((hT - self.profile) ** 2) * dx))

    def penalty_and_grad(self, hT, dx):
        """``0.5 * violation^2`` and its gradient in the terminal state."""
        if self.kind == "terminal_projection":
            gap = max(0.0, self.level - float(np.dot(hT, self.profile) * dx))
            return 0.5 * gap * gap, -gap * self.profile * dx
        diff = hT - self.profile
        return 0.5 * float(np.sum(diff * diff) * dx), diff * dx


def _check_eta_row(eta, h, grid):
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (grid.nx,):
        raise ValidationError("initial condition does not match grid")
    if np.max(np.abs(h.values[0] - eta)) > 1e-12 * (1 + np.max(np.abs(eta))):
        raise ValidationError("trajectory row 0 differs from the initial condition")
    return eta


def evaluate_rate_direct(eta, c, h, grid):
    """Action of the unique control that steers the discrete skeleton along ``h``.

    Each step of the scheme is solved for ``sigma * v``, which is then divided
    by ``sigma``; this requires a noise coefficient bounded away from zero.
    """
    if not c.sigma_min > 0:
        raise UnsupportedDegeneracy("direct rate evaluation needs sigma_min > 0")
    if h.grid != grid:
        raise ValidationError("trajectory grid does not match")
    _check_eta_row(eta, h, grid)
    sch = Scheme(grid, c)
    U = h.values
    v = np.empty(grid.cell_shape)
    for j in range(grid.nt):
        r, s = sch.residual(j, U[j], U[j + 1])
        v[j] = r / s
    ctrl = Control(grid, v)
    return RateResult(0.5 * ctrl.norm_sq, ctrl)


def objective(v, eta, c, grid, target, penalty_weight=None):
    """``0.5 ||v||^2 + mu * penalty(h_v(T))`` with ``h_v`` the skeleton solution."""
    mu = target.penalty_weight if penalty_weight is None else penalty_weight
    h = solve_skeleton(eta, c, grid, v)
    pen, _ = target.penalty_and_grad(h.terminal, grid.dx)
    return 0.5 * v.norm_sq + mu * pen


def _value_and_gradient(v, eta, c, grid, target, mu, scheme):
    h = solve_skeleton(eta, c, grid, v)
    U = h.values
    pen, lam = target.penalty_and_grad(U[-1], grid.dx)
    lam = mu * lam
    dt, dx, x = grid.dt, grid.dx, grid.x
    vv = v.values
    grad = np.empty(grid.cell_shape)
    for j in range(grid.nt - 1, -1, -1):
        t = j * dt
        Uj = U[j]
        p = scheme.solve_A(lam)
        s = c.sigma(t, x, Uj)
        grad[j] = vv[j] + s * p / dx
        lam = p + dt * p * (c.df(t, x, Uj) + c.dsigma(t, x, Uj) * vv[j]) \
            + dt * c.dg(t, x, Uj) * scheme.ddx_T(p)
    return 0.5 * v.norm_sq + mu * pen, grad, h


def adjoint_gradient(v, eta, c, grid, target, penalty_weight=None):
    """L2 gradient of :func:`objective` with respect to the control.

    The adjoint recursion is the exact transpose of the forward time
    stepping, so the result is the derivative of the discrete objective.
    """
    target.check_grid(grid)
    mu = target.penalty_weight if penalty_weight is None else penalty_weight
    _, grad, _ = _value_and_gradient(v, eta, c, grid, target, mu, Scheme(grid, c))
    return Control(grid, grad)


def minimize_rate(eta, c, grid, target, max_iter=500, gtol=1e-6, mu_growth=10.0,
                  mu_max=1e12, callback=None):
    """Minimum action to reach ``target`` from ``eta``.

    L-BFGS on the penalised objective, warm-started across an increasing
    sequence of penalty weights until the violation is within
    ``target.tolerance``. Local minima are reported as found.

    Returns
    -------
    RateResult
        ``value`` excludes the penalty. ``converged`` is false when the
        iteration budget or ``mu_max`` is exhausted first.
    """
    target.check_grid(grid)
    eta = np.asarray(eta, dtype=float)
    scheme = Scheme(grid, c)
    v = Control.zeros(grid)
    h0 = solve_skeleton(eta, c, grid, v)
    if target.violation(h0.terminal, grid.dx) <= target.tolerance:
        return RateResult(0.0, v, 0, 0.0, True, target.penalty_weight, 0.0)

    w = np.sqrt(grid.dx * grid.dt)
    mu = target.penalty_weight
    iterations = 0
    history = []
    z = v.values.ravel() * w

    while True:
        def fun(zz):
            ctrl = Control(grid, zz.reshape(grid.cell_shape) / w)
            J, g, _ = _value_and_gradient(ctrl, eta, c, grid, target, mu, scheme)
            return J, (g * w).ravel()

        def record(intermediate_result):
            history.append((mu, float(intermediate_result.fun)))
            if callback is not None:
                callback(mu, intermediate_result)

        res = minimize(fun, z, jac=True, method="L-BFGS-B", callback=record,
                       options={"maxiter": max(1, max_iter - iterations), "gtol": 1e-14,
                                "ftol": 1e-15, "maxcor": 20})
        iterations += int(res.nit)
        z = res.x
        v = Control(grid, z.reshape(grid.cell_shape) / w)
        _, grad, h = _value_and_gradient(v, eta, c, grid, target, mu, scheme)
        grad_norm = float(np.sqrt(np.sum(grad * grad) * grid.dx * grid.dt))
        viol = target.violation(h.terminal, grid.dx)
        met = viol <= target.tolerance
        stationary = grad_norm <= gtol * max(1.0, np.sqrt(v.norm_sq))
        if met or iterations >= max_iter or mu * mu_growth > mu_max:
            return RateResult(0.5 * v.norm_sq, v, iterations, grad_norm, bool(met and stationary),
                              mu, viol, history)
        mu *= mu_growth

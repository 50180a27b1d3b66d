"""
Monte Carlo estimation of small-noise rare events.

Plain sampling averages an event indicator over independent sheets. Tilted
sampling drives the controlled equation with the drift ``sigma * v`` and
reweights each path by the Girsanov density

    exp(-eps^{-1/2} <v, dW> - ||v||^2 / (2 eps)),

which on the grid is the exact likelihood ratio between shifted and
unshifted Gaussian increments, so both estimators are unbiased for the same
discrete probability.

Sample ``k`` of a run always draws its sheet from ``derive_seed(master_seed, k)``
and sums use a fixed pairwise tree, so results do not depend on batching or
on the number of worker threads.
"""
import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DomainError, SampleExclusionError, ValidationError
from .grid_noise import derive_seed, oscillatory_family, sample_sheet
from .kernel import apply_semigroup
from .rate import TargetSpec, minimize_rate
from .solver import Scheme, SolveConfig, c0l2_distance, march, solve, solve_skeleton

__all__ = [
    "EventSpec",
    "MCEstimate",
    "LDPReport",
    "likelihood_weight",
    "log_likelihood_weight",
    "pairwise_sum",
    "estimate_probability",
    "gaussian_projection_oracle",
    "ldp_curve",
    "a1_experiment",
    "a2_experiment",
    "loglog_slope",
]

MAX_EXCLUDED_FRACTION = 1e-3

EVENT_KINDS = ("terminal_projection_geq", "terminal_l2_geq", "sup_l2_geq")


@dataclass(frozen=True)
class EventSpec:
    kind: str
    level: float
    profile: np.ndarray = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")
        if self.kind == "terminal_projection_geq":
            if self.profile is None:
                raise ValidationError("projection events need a profile")
            object.__setattr__(self, "profile", np.asarray(self.profile, dtype=float))

    def check_grid(self, grid):
        if self.profile is not None and self.profile.shape != (grid.nx,):
            raise ValidationError("event profile does not match grid")

    def statistic(self, terminal, sup_l2, dx):
        if self.kind == "terminal_projection_geq":
            return terminal @ self.profile * dx
        if self.kind == "terminal_l2_geq":
            return np.sqrt(np.sum(terminal * terminal, axis=-1) * dx)
        return sup_l2

    def occurs(self, terminal, sup_l2, dx):
        return self.statistic(terminal, sup_l2, dx) >= self.level

    def indicator(self, traj):
        """Event indicator of a single :class:`~spde_ldp.solver.Trajectory`."""
        from .solver import sup_l2 as _sup
        return bool(self.occurs(traj.terminal, _sup(traj), traj.grid.dx))


def pairwise_sum(a):
    """Sum with a fixed binary tree over the zero-padded power-of-two length."""
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        return 0.0
    size = 1 << (a.size - 1).bit_length()
    buf = np.zeros(size)
    buf[: a.size] = a
    while buf.size > 1:
        buf = buf[0::2] + buf[1::2]
    return float(buf[0])


def log_likelihood_weight(v_values, increments, epsilon, dx, dt):
    """Log of the Girsanov weight; ``increments`` may carry leading batch axes."""
    if not epsilon > 0:
        raise DomainError("epsilon must be > 0")
    pairing = np.sum(increments * v_values, axis=(-2, -1))
    norm_sq = float(np.sum(v_values * v_values) * dx * dt)
    return -pairing / math.sqrt(epsilon) - norm_sq / (2.0 * epsilon)


def likelihood_weight(v, sheet, epsilon):
    """``dQ/dP`` of the shift by ``v`` evaluated on one sheet."""
    if v.grid != sheet.grid:
        raise ValidationError("control and sheet grids differ")
    g = v.grid
    return math.exp(log_likelihood_weight(v.values, sheet.increments, epsilon, g.dx, g.dt))


@dataclass
class MCEstimate:
    p_hat: float
    std_error: float
    n: int
    epsilon: float
    method: str
    master_seed: int
    n_excluded: int = 0
    hits: int = 0

    CSV_HEADER = ("p_hat", "std_error", "n", "n_excluded", "hits", "epsilon", "method", "master_seed")

    def csv_row(self):
        return [repr(self.p_hat), repr(self.std_error), self.n, self.n_excluded, self.hits,
                repr(float(self.epsilon)), self.method, self.master_seed]


def _sample_batch(indices, grid, master_seed):
    return np.stack([sample_sheet(grid, derive_seed(master_seed, k)).increments for k in indices])


def estimate_probability(event, eta, c, grid, epsilon, n, master_seed, tilt=None,
                         truncation_level=None, max_sup_l2=1e6, threads=1, batch_size=None):
    """Monte Carlo estimate of ``P(event)`` for the SPDE at noise level ``epsilon``.

    With ``tilt`` the controlled equation is simulated and each sample is
    weighted by the Girsanov density of ``tilt``.

    Raises
    ------
    SampleExclusionError
        More than 0.1% of the samples blew up.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be > 0")
    if n < 1:
        raise ValidationError("n must be >= 1")
    event.check_grid(grid)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (grid.nx,):
        raise ValidationError("initial condition does not match grid")
    if tilt is not None and tilt.grid != grid:
        raise ValidationError("tilt grid does not match")
    cfg = SolveConfig(epsilon, truncation_level, max_sup_l2)
    scheme = Scheme(grid, c)
    if batch_size is None:
        batch_size = max(1, min(n, (1 << 22) // (grid.nt * grid.nx)))
    contrib = np.empty(n)
    hit = np.zeros(n, dtype=bool)
    blown = np.zeros(n, dtype=bool)

    def run(lo):
        idx = range(lo, min(n, lo + batch_size))
        dW = _sample_batch(idx, grid, master_seed)
        res = march(eta, c, grid, cfg, tilt, dW, scheme=scheme)
        occ = event.occurs(res["terminal"], res["sup_l2"], grid.dx)
        sl = slice(idx.start, idx.stop)
        blown[sl] = res["blowup_step"] >= 0
        hit[sl] = occ & ~blown[sl]
        if tilt is None:
            contrib[sl] = occ
        else:
            logw = log_likelihood_weight(tilt.values, dW, epsilon, grid.dx, grid.dt)
            contrib[sl] = np.where(occ, np.exp(logw), 0.0)

    starts = range(0, n, batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)

    n_excl = int(blown.sum())
    if n_excl > MAX_EXCLUDED_FRACTION * n:
        raise SampleExclusionError(n_excl, n)
    kept = contrib[~blown]
    m = kept.size
    mean = pairwise_sum(kept) / m
    if m > 1:
        var = pairwise_sum((kept - mean) ** 2) / (m - 1)
        se = math.sqrt(var / m)
    else:
        se = 0.0
    return MCEstimate(mean, se, m, float(epsilon), "plain" if tilt is None else "tilted",
                      int(master_seed), n_excl, int(hit.sum()))


def projection_variance(profile, grid):
    """Variance per unit epsilon of ``<U(T), profile>`` for the linear heat SPDE."""
    k = np.arange(1, grid.nx + 1)
    modes = np.sqrt(2.0) * np.sin(np.pi * np.outer(k, grid.x))
    coeff = modes @ profile * grid.dx
    lam = (np.pi * k) ** 2
    return float(np.sum(coeff ** 2 * -np.expm1(-2 * lam * grid.T) / (2 * lam)))


def gaussian_projection_oracle(eta, profile, grid, epsilon, level):
    """Exact ``P(<U(T), profile> >= level)`` and ``-eps log P`` for the linear heat SPDE.

    The projection is Gaussian with mean ``<S(T) eta, profile>`` and variance
    ``epsilon * s^2``; the profile is expanded in grid sine modes.
    """
    mean = float(apply_semigroup(np.asarray(eta, dtype=float), grid.T) @ profile * grid.dx)
    s = math.sqrt(projection_variance(profile, grid))
    z = (level - mean) / (math.sqrt(epsilon) * s)
    logp = float(norm.logsf(z))
    return math.exp(logp), -epsilon * logp


@dataclass
class LDPReport:
    rows: list = field(default_factory=list)
    reference_rate: float = None
    oracle: bool = False

    CSV_HEADER = ("epsilon", "method", "n", "n_excluded", "p_hat", "std_error", "minus_eps_log_p",
                  "ci_low", "ci_high", "reference_rate", "oracle_minus_eps_log_p")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in self.CSV_HEADER])
        return buf.getvalue()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _minus_eps_log(eps, p):
    if p >= 1:
        return 0.0
    return -eps * math.log(p) if p > 0 else math.inf


def ldp_curve(event, eta, c, grid, epsilon_list, n, master_seed, tilt_policy="auto",
              tilt=None, auto_threshold=0.1, threads=1, rate_options=None):
    """``-eps log p_hat`` over decreasing noise levels, with the minimum action.

    ``tilt_policy`` is ``"plain"``, ``"tilted"`` or ``"auto"`` (tilted for
    ``eps < auto_threshold``). For projection events the tilt defaults to the
    minimising control from :func:`~spde_ldp.rate.minimize_rate`, whose value
    becomes ``reference_rate``. The confidence band maps ``p_hat +- 1.96 SE``.
    """
    eps = [float(e) for e in epsilon_list]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValidationError("epsilon_list must be positive and strictly decreasing")
    if tilt_policy not in ("plain", "tilted", "auto"):
        raise ValidationError(f"unknown tilt policy {tilt_policy!r}")
    event.check_grid(grid)
    report = LDPReport()
    if event.kind == "terminal_projection_geq":
        target = TargetSpec("terminal_projection", event.profile, event.level, **(rate_options or {}))
        best = minimize_rate(eta, c, grid, target)
        report.reference_rate = best.value
        if tilt is None:
            tilt = best.control
    oracle = event.kind == "terminal_projection_geq" and c.name == "linear_heat"
    report.oracle = oracle
    for k, e in enumerate(eps):
        tilted = tilt_policy == "tilted" or (tilt_policy == "auto" and e < auto_threshold)
        if tilted and tilt is None:
            raise ValidationError("tilted sampling needs a tilt for this event kind")
        est = estimate_probability(event, eta, c, grid, e, n, derive_seed(master_seed, k),
                                   tilt if tilted else None, threads=threads)
        hi_p = est.p_hat + 1.96 * est.std_error
        lo_p = est.p_hat - 1.96 * est.std_error
        row = {
            "epsilon": e,
            "method": est.method,
            "n": est.n,
            "n_excluded": est.n_excluded,
            "p_hat": est.p_hat,
            "std_error": est.std_error,
            "minus_eps_log_p": _minus_eps_log(e, est.p_hat),
            "ci_low": _minus_eps_log(e, hi_p),
            "ci_high": _minus_eps_log(e, lo_p) if lo_p > 0 else math.inf,
            "reference_rate": report.reference_rate,
            "oracle_minus_eps_log_p": None,
        }
        if oracle:
            row["oracle_minus_eps_log_p"] = gaussian_projection_oracle(
                eta, event.profile, grid, e, event.level)[1]
        report.rows.append(row)
    return report


def _per_epsilon(family, eps, default):
    if family is None:
        return default
    if callable(family):
        return family(eps)
    return family[eps]


def a2_experiment(eta, c, grid, v, epsilon_list, seeds=range(20), eta_family=None,
                  v_family=None, M=None):
    """Distance between controlled noisy paths and the limiting skeleton.

    For each ``eps``, solves the controlled SPDE with ``(eta^eps, v^eps)``
    under each seed and reports the mean of ``c0l2_distance`` to
    ``solve_skeleton(eta, c, grid, v)``. Families may be callables of
    ``eps`` or mappings keyed by ``eps``; ``None`` means constant.

    Returns
    -------
    list of dict
        Rows with ``epsilon, mean_distance, std_distance, n_seeds``.
    """
    limit = solve_skeleton(eta, c, grid, v)
    seeds = list(seeds)
    controls = {e: _per_epsilon(v_family, e, v) for e in epsilon_list}
    if M is None:
        M = max(u.norm_sq for u in controls.values())
    if any(not u.in_ball(M) for u in controls.values()):
        raise ValidationError(f"controls leave the ball of radius^2 {M}")
    rows = []
    for e in epsilon_list:
        if not e > 0:
            raise ValidationError("epsilon must be > 0")
        eta_e = _per_epsilon(eta_family, e, eta)
        d = np.array([
            c0l2_distance(solve(eta_e, c, grid, SolveConfig(e), controls[e],
                                sample_sheet(grid, derive_seed(s, 0))), limit)
            for s in seeds
        ])
        rows.append({"epsilon": float(e), "mean_distance": pairwise_sum(d) / d.size,
                     "std_distance": float(np.std(d, ddof=1)) if d.size > 1 else 0.0,
                     "n_seeds": d.size})
    return rows


def loglog_slope(rows, x="epsilon", y="mean_distance"):
    """Least-squares slope of ``log y`` against ``log x``."""
    xs = np.log([r[x] for r in rows])
    ys = np.log([r[y] for r in rows])
    return float(np.polyfit(xs, ys, 1)[0])


def a1_experiment(eta, c, grid, v, n_list, amplitude):
    """Skeleton distance between ``v`` and its oscillatory perturbations.

    Returns rows ``{n, distance}`` for the increasing frequencies ``n_list``.
    """
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be increasing")
    base = solve_skeleton(eta, c, grid, v)
    return [{"n": int(n), "distance": c0l2_distance(
        solve_skeleton(eta, c, grid, oscillatory_family(v, n, amplitude)), base)} for n in n_list]

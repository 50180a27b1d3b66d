"""
Coefficient triples ``(f, g = g1 + g2, sigma)`` and sampled hypothesis checks.

Every coefficient is a vectorised callable. ``f``, ``g1`` and ``sigma`` take
``(t, x, r)``; ``g2`` takes ``(t, r)``. The ``d*`` companions are the
derivatives in ``r``, used by the adjoint solver.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import HypothesisViolation, ValidationError

__all__ = [
    "Coefficients",
    "HypothesisReport",
    "PRESETS",
    "preset",
    "check_hypotheses",
]


def _zero3(t, x, r):
    return np.zeros(np.broadcast(t, x, r).shape)


def _zero2(t, r):
    return np.zeros(np.broadcast(t, r).shape)


def _one3(t, x, r):
    return np.ones(np.broadcast(t, x, r).shape)


@dataclass(frozen=True)
class Coefficients:
    name: str
    f: callable = _zero3
    g1: callable = _zero3
    g2: callable = _zero2
    sigma: callable = _one3
    df: callable = _zero3
    dg1: callable = _zero3
    dg2: callable = _zero2
    dsigma: callable = _zero3
    K: float = 0.0
    L: float = 0.0
    sigma_min: float = 1.0
    sigma_max: float = 1.0
    params: dict = field(default_factory=dict)

    def g(self, t, x, r):
        return self.g1(t, x, r) + self.g2(t, r)

    def dg(self, t, x, r):
        return self.dg1(t, x, r) + self.dg2(t, r)

    @property
    def additive(self):
        """True when sigma is identically one (checked by construction, not sampling)."""
        return self.params.get("additive", False)


def linear_heat():
    return Coefficients("linear_heat", K=0.0, L=0.0, params={"additive": True})


def _bounded_sigma(s0, s1):
    def sigma(t, x, r):
        return s0 + s1 * r / (1.0 + np.abs(r)) + 0.0 * (t + x)

    def dsigma(t, x, r):
        return s1 / (1.0 + np.abs(r)) ** 2 + 0.0 * (t + x)

    return sigma, dsigma


def burgers(noise="additive", s0=1.0, s1=0.5):
    """Burgers flux ``g2 = r^2/2``; ``noise='bounded'`` swaps in ``s0 + s1 r/(1+|r|)``."""

    def g2(t, r):
        return 0.5 * r * r + 0.0 * t

    def dg2(t, r):
        return r + 0.0 * t

    if noise == "additive":
        return Coefficients("burgers", g2=g2, dg2=dg2, K=0.5, L=0.5,
                            params={"additive": True, "noise": noise})
    if noise == "bounded":
        _check_sigma_params(s0, s1)
        sigma, dsigma = _bounded_sigma(s0, s1)
        return Coefficients("burgers", g2=g2, dg2=dg2, sigma=sigma, dsigma=dsigma,
                            K=0.5, L=max(0.5, s1), sigma_min=s0 - s1, sigma_max=s0 + s1,
                            params={"noise": noise, "s0": s0, "s1": s1})
    raise ValidationError(f"unknown burgers noise variant {noise!r}")


def _check_sigma_params(s0, s1):
    if not s0 > s1 >= 0:
        raise ValidationError("need s0 > s1 >= 0")


def reaction_diffusion(a=1.0, s0=1.0, s1=0.5):
    """Bounded reaction ``a sin(r)`` with noise ``s0 + s1 r/(1+|r|)``."""
    _check_sigma_params(s0, s1)

    def f(t, x, r):
        return a * np.sin(r) + 0.0 * (t + x)

    def df(t, x, r):
        return a * np.cos(r) + 0.0 * (t + x)

    sigma, dsigma = _bounded_sigma(s0, s1)
    return Coefficients("reaction_diffusion", f=f, df=df, sigma=sigma, dsigma=dsigma,
                        K=abs(a), L=max(abs(a), s1), sigma_min=s0 - s1, sigma_max=s0 + s1,
                        params={"a": a, "s0": s0, "s1": s1})


PRESETS = {
    "linear_heat": linear_heat,
    "burgers": burgers,
    "reaction_diffusion": reaction_diffusion,
}


def preset(name, **params):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)


@dataclass
class HypothesisReport:
    """Smallest slack ``rhs - lhs`` seen for each inequality (negative = violated)."""

    margins: dict
    n_samples: int
    r_box: float

    @property
    def passed(self):
        return all(m >= 0 for m in self.margins.values())


def check_hypotheses(c, n_samples=10_000, r_box=10.0, seed=0, T=1.0, rtol=1e-12):
    """Sample the growth, Lipschitz and boundedness inequalities for ``c``.

    Raises
    ------
    HypothesisViolation
        At the first inequality with a sampled violation, naming the witness.
    """
    if n_samples < 100:
        raise ValidationError("n_samples must be >= 100")
    if not r_box > 0:
        raise ValidationError("r_box must be positive")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, T, n_samples)
    x = rng.uniform(0, 1, n_samples)
    r = rng.uniform(-r_box, r_box, n_samples)
    p = rng.uniform(-r_box, r_box, n_samples)
    q = rng.uniform(-r_box, r_box, n_samples)
    K, L = c.K, c.L
    a = np.abs
    s = c.sigma(t, x, r)
    dpq = a(p - q)
    loc = L * (1 + a(p) + a(q)) * dpq
    checks = [
        ("|f| <= K(1+|r|)", a(c.f(t, x, r)), K * (1 + a(r)), (t, x, r)),
        ("|g1| <= K(1+|r|)", a(c.g1(t, x, r)), K * (1 + a(r)), (t, x, r)),
        ("|g2| <= K(1+r^2)", a(c.g2(t, r)), K * (1 + r * r), (t, x, r)),
        ("|sigma(p)-sigma(q)| <= L|p-q|", a(c.sigma(t, x, p) - c.sigma(t, x, q)), L * dpq, (t, x, p, q)),
        ("|f(p)-f(q)| <= L(1+|p|+|q|)|p-q|", a(c.f(t, x, p) - c.f(t, x, q)), loc, (t, x, p, q)),
        ("|g(p)-g(q)| <= L(1+|p|+|q|)|p-q|", a(c.g(t, x, p) - c.g(t, x, q)), loc, (t, x, p, q)),
        ("sigma >= sigma_min", c.sigma_min + 0 * s, s, (t, x, r)),
        ("sigma <= sigma_max", s, c.sigma_max + 0 * s, (t, x, r)),
    ]
    margins = {}
    for name, lhs, rhs, pts in checks:
        slack = rhs - lhs + rtol * (a(lhs) + a(rhs))
        k = int(np.argmin(slack))
        if slack[k] < 0:
            raise HypothesisViolation(name, tuple(float(z[k]) for z in pts), float(lhs[k]), float(rhs[k]))
        margins[name] = float(np.min(rhs - lhs))
    return HypothesisReport(margins, n_samples, r_box)

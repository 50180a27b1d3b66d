r"""
Dirichlet heat kernel on the unit interval.

The kernel of :math:`\partial_t - \partial_x^2` on :math:`[0,1]` with zero
boundary values has two classical representations:

* the sine series :math:`G_t(x,y) = \sum_{k\ge1} 2\sin(k\pi x)\sin(k\pi y)e^{-k^2\pi^2 t}`,
  which converges fast for large :math:`t`;
* the method of images
  :math:`G_t(x,y) = \sum_{m\in\mathbb Z}\Phi_t(x-y+2m)-\Phi_t(x+y+2m)` with
  :math:`\Phi_t(z)=(4\pi t)^{-1/2}e^{-z^2/4t}`, which converges fast for small
  :math:`t`.

:func:`eval_G` and friends switch between the two at ``KernelConfig.t_switch``.
Both forms are also exposed directly so they can be compared.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from .errors import DomainError, ValidationError

__all__ = [
    "KernelConfig",
    "KernelBoundReport",
    "G_spectral",
    "G_images",
    "dGdy_spectral",
    "dGdy_images",
    "eval_G",
    "eval_dGdy",
    "eval_dGdx",
    "eval_dGdt",
    "apply_semigroup",
    "semigroup_identity_error",
    "holder_increment",
    "check_kernel_bounds",
]

PI2 = np.pi ** 2


def _spectral_terms_needed(t_min, tol):
    """Smallest k such that the k-th sine-series term is below ``tol`` for t >= t_min."""
    # term magnitude <= 2 k^p exp(-k^2 pi^2 t); p <= 2 covers G, dG and dG/dt
    k = int(np.ceil(np.sqrt(np.log(2.0 / tol) / (PI2 * t_min))))
    while 2.0 * (k * np.pi) ** 2 * np.exp(-(k * k) * PI2 * t_min) >= tol:
        k += 1
    return max(k, 1)


def _image_terms_needed(t_max, tol):
    """Smallest image index M such that every omitted image is below ``tol`` for t <= t_max."""
    m = 1
    while _image_magnitude(m, t_max) >= tol:
        m += 1
    return m


def _image_magnitude(m, t):
    # omitted images sit at distance >= 2m from the interval; include the
    # z/(2t) factor of the derivative so one count serves G and dG
    z = 2.0 * m
    return (1.0 + z / (2.0 * t) + z * z / (4.0 * t * t)) * np.exp(-z * z / (4.0 * t)) / np.sqrt(4.0 * np.pi * t)


@dataclass(frozen=True)
class KernelConfig:
    """Truncation settings for kernel evaluation.

    ``k_max`` and ``image_count`` are sized from ``tol`` when left as ``None``.
    """

    k_max: int = None
    image_count: int = None
    t_switch: float = 0.05
    tol: float = 1e-14
    T: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if not 0 < self.t_switch <= self.T:
            raise ValidationError("need 0 < t_switch <= T")
        if self.k_max is None:
            object.__setattr__(self, "k_max", _spectral_terms_needed(self.t_switch, self.tol))
        if self.image_count is None:
            object.__setattr__(self, "image_count", _image_terms_needed(self.t_switch, self.tol))
        if self.k_max < 1 or self.image_count < 1:
            raise ValidationError("k_max and image_count must be >= 1")
        k = self.k_max
        if 2.0 * np.exp(-k * k * PI2 * self.t_switch) >= self.tol:
            raise ValidationError(f"k_max={k} too small for tol={self.tol} at t_switch")
        if _image_magnitude(self.image_count, self.t_switch) >= self.tol:
            raise ValidationError(
                f"image_count={self.image_count} too small for tol={self.tol} at t_switch"
            )


DEFAULT_CONFIG = KernelConfig()


def _check_domain(t, x, y, allow_zero_t=False):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    bad_t = t < 0 if allow_zero_t else t <= 0
    if np.any(bad_t) or np.any(~np.isfinite(t)):
        raise DomainError("kernel time must be > 0")
    for name, z in (("x", x), ("y", y)):
        if np.any((z < 0) | (z > 1)) or np.any(~np.isfinite(z)):
            raise DomainError(f"{name} must lie in [0, 1]")
    return np.broadcast_arrays(t, x, y)


def _kgrid(t, k_max, tol):
    if k_max is None:
        k_max = _spectral_terms_needed(float(np.min(t)), tol)
    return np.arange(1, k_max + 1, dtype=float)


def G_spectral(t, x, y, k_max=None, tol=1e-15):
    """Sine-series evaluation of the kernel, truncated at ``k_max`` modes."""
    t, x, y = _check_domain(t, x, y)
    k = _kgrid(t, k_max, tol)
    kx = np.pi * k
    terms = np.sin(kx * x[..., None]) * np.sin(kx * y[..., None]) * np.exp(-k * k * PI2 * t[..., None])
    return 2.0 * terms.sum(axis=-1)


def dGdy_spectral(t, x, y, k_max=None, tol=1e-15):
    t, x, y = _check_domain(t, x, y)
    k = _kgrid(t, k_max, tol)
    kx = np.pi * k
    terms = kx * np.sin(kx * x[..., None]) * np.cos(kx * y[..., None]) * np.exp(-k * k * PI2 * t[..., None])
    return 2.0 * terms.sum(axis=-1)


def dGdt_spectral(t, x, y, k_max=None, tol=1e-15):
    t, x, y = _check_domain(t, x, y)
    k = _kgrid(t, k_max, tol)
    kx = np.pi * k
    terms = -(kx * kx) * np.sin(kx * x[..., None]) * np.sin(kx * y[..., None]) * np.exp(-k * k * PI2 * t[..., None])
    return 2.0 * terms.sum(axis=-1)


def _mgrid(t, image_count, tol):
    if image_count is None:
        image_count = _image_terms_needed(float(np.max(t)), tol)
    return np.arange(-image_count, image_count + 1, dtype=float)


def _phi(z, t):
    return np.exp(-z * z / (4.0 * t)) / np.sqrt(4.0 * np.pi * t)


def G_images(t, x, y, image_count=None, tol=1e-15):
    """Method-of-images evaluation with images ``-image_count..image_count``."""
    t, x, y = _check_domain(t, x, y)
    m = 2.0 * _mgrid(t, image_count, tol)
    tt = t[..., None]
    direct = _phi(x[..., None] - y[..., None] + m, tt)
    mirror = _phi(x[..., None] + y[..., None] + m, tt)
    return (direct - mirror).sum(axis=-1)


def dGdy_images(t, x, y, image_count=None, tol=1e-15):
    t, x, y = _check_domain(t, x, y)
    m = 2.0 * _mgrid(t, image_count, tol)
    tt = t[..., None]
    z1 = x[..., None] - y[..., None] + m
    z2 = x[..., None] + y[..., None] + m
    # d/dy Phi(x-y+2m) = z1/(2t) Phi(z1);  d/dy Phi(x+y+2m) = -z2/(2t) Phi(z2)
    return (z1 * _phi(z1, tt) + z2 * _phi(z2, tt)).sum(axis=-1) / (2.0 * t)


def dGdt_images(t, x, y, image_count=None, tol=1e-15):
    t, x, y = _check_domain(t, x, y)
    m = 2.0 * _mgrid(t, image_count, tol)
    tt = t[..., None]
    z1 = x[..., None] - y[..., None] + m
    z2 = x[..., None] + y[..., None] + m

    def dphi_dt(z):
        return _phi(z, tt) * (z * z / (4.0 * tt * tt) - 0.5 / tt)

    return (dphi_dt(z1) - dphi_dt(z2)).sum(axis=-1)


def _switched(spectral, images, t, x, y, cfg):
    cfg = cfg or DEFAULT_CONFIG
    t, x, y = _check_domain(t, x, y)
    out = np.empty(t.shape)
    small = t < cfg.t_switch
    if np.any(small):
        out[small] = images(t[small], x[small], y[small], image_count=cfg.image_count)
    if np.any(~small):
        out[~small] = spectral(t[~small], x[~small], y[~small], k_max=cfg.k_max)
    return out[()] if out.ndim == 0 else out


def eval_G(t, x, y, cfg=None):
    """Heat kernel :math:`G_t(x,y)`; broadcasts over array arguments.

    Raises
    ------
    DomainError
        If ``t <= 0`` or ``x``/``y`` fall outside ``[0, 1]``.
    """
    return _switched(G_spectral, G_images, t, x, y, cfg)


def eval_dGdy(t, x, y, cfg=None):
    """Derivative :math:`\\partial_y G_t(x,y)`."""
    return _switched(dGdy_spectral, dGdy_images, t, x, y, cfg)


def eval_dGdx(t, x, y, cfg=None):
    # G is symmetric, so d/dx G(x,y) = d/dy G(y,x)
    return eval_dGdy(t, y, x, cfg)


def eval_dGdt(t, x, y, cfg=None):
    return _switched(dGdt_spectral, dGdt_images, t, x, y, cfg)


def apply_semigroup(u, t):
    r"""Apply :math:`u \mapsto \int_0^1 G_t(\cdot,y)u(y)\,dy` on the interior grid.

    ``u`` holds values at the ``nx`` interior nodes ``i/(nx+1)``; the last axis
    is transformed, leading axes are batch axes. The DST-I diagonalises the
    grid sine modes, each of which is damped by its exact continuum factor
    :math:`e^{-k^2\pi^2 t}`.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] < 1:
        raise ValidationError("field must have at least one grid point")
    if t < 0:
        raise DomainError("semigroup time must be >= 0")
    if t == 0:
        return u.copy()
    nx = u.shape[-1]
    k = np.arange(1, nx + 1, dtype=float)
    coeffs = fft.dst(u, type=1, axis=-1, norm="ortho")
    coeffs *= np.exp(-k * k * PI2 * t)
    return fft.idst(coeffs, type=1, axis=-1, norm="ortho")


def semigroup_identity_error(s, t, nx=256, cfg=None):
    """Max over interior grid pairs of the Chapman-Kolmogorov defect.

    The inner integral over the middle variable uses the trapezoid rule on the
    same grid (the integrand vanishes at both ends).
    """
    if s <= 0 or t <= 0:
        raise DomainError("s and t must be > 0")
    if nx < 2:
        raise ValidationError("nx must be >= 2")
    dx = 1.0 / (nx + 1)
    x = dx * np.arange(1, nx + 1)
    X, Z = np.meshgrid(x, x, indexing="ij")
    Gs = eval_G(s, X, Z, cfg)
    Gt = eval_G(t, Z, X, cfg)
    composed = dx * (Gs @ Gt)
    return float(np.max(np.abs(composed - eval_G(s + t, X, Z, cfg))))


def holder_increment(s, t, x, y, k_max=None):
    r"""Exact value of :math:`\int_0^T\int_0^1 |G_{t-r}(x,z) - G_{s-r}(y,z)|^2\,dz\,dr`.

    Uses :math:`G_r = 0` for :math:`r \le 0` and requires :math:`0 < s < t`.
    The sine series is summed to ``k_max`` and the remaining tail is closed
    with :math:`\sum_{k\ge1}\sin^2(k\pi x)/k^2 = \pi^2 x(1-x)/2`.
    """
    s, t, x, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (s, t, x, y)))
    if np.any(s <= 0) or np.any(t <= s):
        raise DomainError("need 0 < s < t")
    gap = float(np.min(np.minimum(s, t - s)))
    if k_max is None:
        # tail closure needs exp(-k^2 pi^2 gap) negligible past k_max
        k_max = max(64, int(np.ceil(np.sqrt(40.0 / (PI2 * gap)))))
    flat = [a.ravel() for a in (s, t, x, y)]
    out = np.empty(flat[0].shape)
    k = np.arange(1, k_max + 1, dtype=float)
    lam = k * k * PI2
    chunk = max(1, 2_000_000 // k_max)
    for lo in range(0, out.size, chunk):
        sl = slice(lo, lo + chunk)
        ss, tt, xx, yy = (a[sl, None] for a in flat)
        sx = np.sin(np.pi * k * xx)
        sy = np.sin(np.pi * k * yy)
        a_k = sx * np.exp(-lam * (tt - ss)) - sy
        terms = (a_k ** 2 * (-np.expm1(-2 * lam * ss)) + sx ** 2 * (-np.expm1(-2 * lam * (tt - ss)))) / lam
        head_x = (sx ** 2 / lam).sum(axis=1)
        head_y = (sy ** 2 / lam).sum(axis=1)
        x0, y0 = flat[2][sl], flat[3][sl]
        tail = (0.5 * x0 * (1 - x0) - head_x) + (0.5 * y0 * (1 - y0) - head_y)
        out[sl] = terms.sum(axis=1) + tail
    return out.reshape(s.shape)


@dataclass
class KernelBoundReport:
    """Fitted constants for the four kernel estimates.

    ``rows`` maps estimate id to ``(fitted_K, fitted_exponent, max_ratio)``.
    For estimates 1-3 the exponent is the Gaussian rate; for estimate 4 it
    is the Holder exponent alpha.
    """

    rows: dict = field(default_factory=dict)
    pass_: bool = False

    @property
    def passed(self):
        return self.pass_

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimate_id", "fitted_K", "fitted_exponent", "max_ratio", "pass"])
        for key, (K, expo, ratio) in self.rows.items():
            ok = bool(np.isfinite(K) and ratio <= K)
            w.writerow([key, repr(float(K)), repr(float(expo)), repr(float(ratio)), str(ok).lower()])
        return buf.getvalue()


def _fit_gaussian_envelope(values, tau, dist2, power, exponents, slack):
    """Least upper bound K(a) of |values| tau^power exp(a dist2/tau) for each a.

    Returns the largest candidate ``a`` whose K stays within ``slack`` times
    the smallest K.
    """
    mag = np.abs(values)
    nz = mag > 0
    base = np.log(mag[nz]) + power * np.log(tau[nz])
    q = dist2[nz] / tau[nz]
    Ks = np.array([np.exp(np.max(base + a * q)) if base.size else 0.0 for a in exponents])
    ok = Ks <= slack * Ks[0]
    return float(exponents[np.nonzero(ok)[0].max()])


def check_kernel_bounds(cfg=None, n_time=16, n_space=16, alpha=0.2, dim=1.0, gamma=2.0,
                        exponent_slack=2.0):
    """Fit the constants of the four standard kernel estimates on a sample grid.

    Times are sampled geometrically on ``[1e-3 T, T]`` (plus ``s = 0`` for
    the pointwise estimates) and positions uniformly on ``[0, 1]``.
    Each constant is the least upper bound of the sampled ratio.

    Parameters
    ----------
    alpha : float
        Holder exponent of the space-time increment estimate; must be below ``(gamma-dim)/(2 gamma)``.
    dim, gamma : float
        The dimension parameter and ``gamma > dim`` entering the admissible range.
    """
    cfg = cfg or DEFAULT_CONFIG
    if n_time < 16 or n_space < 16:
        raise ValidationError("need at least 16 samples per axis")
    if not gamma > dim:
        raise ValidationError("gamma must exceed dim")
    alpha_bar = (gamma - dim) / (2.0 * gamma)
    if not 0 < alpha < alpha_bar:
        raise ValidationError(f"alpha must lie in (0, {alpha_bar})")
    T = cfg.T

    times = np.concatenate([[0.0], T * np.geomspace(1e-3, 1.0, n_time - 1)])
    xs = np.linspace(0.0, 1.0, n_space)
    si, ti = np.triu_indices(times.size, k=1)
    tau_u = np.unique(times[ti] - times[si])
    tau_u = tau_u[tau_u > 0]
    tau, X, Y = np.meshgrid(tau_u, xs, xs, indexing="ij")
    tau, X, Y = tau.ravel(), X.ravel(), Y.ravel()
    d2 = (X - Y) ** 2

    exponents = np.linspace(0.0, 0.25, 26)
    report = KernelBoundReport()
    for key, fn, power in (("1", eval_G, 1.0), ("2", eval_dGdx, 1.5), ("3", eval_dGdt, 2.0)):
        vals = fn(tau, X, Y, cfg)
        expo = _fit_gaussian_envelope(vals, tau, d2, power, exponents, exponent_slack)
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.abs(vals) * tau ** power * np.exp(expo * d2 / tau)
        ratio = np.where(np.abs(vals) > 0, ratio, 0.0)
        K = float(ratio.max())
        report.rows[key] = (K, expo, K)

    inner = T * np.geomspace(1e-3, 0.999, n_time)
    si, ti = np.triu_indices(inner.size, k=1)
    S = inner[si][:, None, None]
    Tt = inner[ti][:, None, None]
    X4 = xs[None, :, None]
    Y4 = xs[None, None, :]
    incr = holder_increment(S, Tt, X4, Y4)
    rho = np.sqrt((Tt - S) ** 2 + (X4 - Y4) ** 2)
    ratio4 = incr / rho ** (2 * alpha)
    K4 = float(np.max(ratio4))
    report.rows["4"] = (K4, alpha, K4)

    report.pass_ = all(np.isfinite(K) and r <= K for K, _, r in report.rows.values())
    return report

"""
Space-time grid, Brownian-sheet increments and discretized controls.

The spatial grid has ``nx`` interior nodes ``x_i = i dx`` (``i = 1..nx``,
``dx = 1/(nx+1)``); boundary values are zero and never stored. Time runs
over ``t_j = j dt``, ``j = 0..nt``. Noise increments and controls live on
the ``nt x nx`` cells ``[t_j, t_{j+1}) x [x_i - dx/2, x_i + dx/2)``.
"""
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

__all__ = [
    "GridSpec",
    "SheetIncrements",
    "Control",
    "sample_sheet",
    "derive_seed",
    "control_norm_sq",
    "int_v",
    "oscillatory_family",
    "refine_sheets",
    "save_field",
    "load_field",
]


@dataclass(frozen=True)
class GridSpec:
    nx: int
    nt: int
    T: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or self.nx < 2:
            raise ValidationError("nx must be an integer >= 2")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ValidationError("nt must be an integer >= 1")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValidationError("T must be positive")

    @property
    def dx(self):
        return 1.0 / (self.nx + 1)

    @property
    def dt(self):
        return self.T / self.nt

    @property
    def x(self):
        """Interior node positions."""
        return np.arange(1, self.nx + 1) / (self.nx + 1)

    @property
    def t(self):
        """Time levels ``t_0 .. t_nt``."""
        return self.T * np.arange(self.nt + 1) / self.nt

    @property
    def t_mid(self):
        """Cell midpoints in time."""
        return self.T * (np.arange(self.nt) + 0.5) / self.nt

    @property
    def cell_shape(self):
        return (self.nt, self.nx)

    def refined(self, space=2, time=4):
        """Dyadic refinement: ``dx -> dx/space``, ``dt -> dt/time``."""
        return GridSpec((self.nx + 1) * space - 1, self.nt * time, self.T)


def derive_seed(master_seed, *path):
    """Deterministic 64-bit seed for the stream indexed by ``path``."""
    ss = np.random.SeedSequence([int(master_seed) & (2**64 - 1), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rng(seed):
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class SheetIncrements:
    """Brownian-sheet rectangle increments, entry ``(j, i) ~ N(0, dt dx)``."""

    grid: GridSpec
    increments: np.ndarray
    seed: int = None

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != self.grid.cell_shape:
            raise ValidationError(f"increments shape {inc.shape} != {self.grid.cell_shape}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)


def sample_sheet(grid, seed):
    """Independent Gaussian increments with variance ``dt*dx``, reproducible from ``seed``.

    A Philox counter-based generator keyed by ``seed`` fills the array in
    row-major order, so identical ``(grid, seed)`` give identical bits.
    """
    z = _rng(seed).standard_normal(grid.cell_shape)
    z *= np.sqrt(grid.dt * grid.dx)
    return SheetIncrements(grid, z, int(seed))


def refine_sheets(grid, levels, seed, space=2, time=4):
    """Coupled sheets on ``grid`` and its successive dyadic refinements.

    All levels are aggregated from one white-noise field on the finest
    half-cell lattice, so coarse increments are exact sums of fine ones.
    Returns a list ``[(grid_l, sheet_l)]`` from coarsest to finest.
    """
    if space != 2:
        raise ValidationError("only spatial factor 2 is supported")
    grids = [grid]
    for _ in range(levels):
        grids.append(grids[-1].refined(space, time))
    finest = grids[-1]
    # base lattice: half of the finest cell width, i.e. 2*(nx+1) units
    n_units = 2 * (finest.nx + 1)
    du = 1.0 / n_units
    dt = finest.dt
    base = _rng(seed).standard_normal((finest.nt, n_units)) * np.sqrt(dt * du)
    cum = np.concatenate([np.zeros((finest.nt, 1)), np.cumsum(base, axis=1)], axis=1)
    out = []
    for g in grids:
        # node i occupies units [i*w - w/2, i*w + w/2) with w = units per dx
        w = n_units // (g.nx + 1)
        i = np.arange(1, g.nx + 1)
        spatial = cum[:, i * w + w // 2] - cum[:, i * w - w // 2]
        steps = finest.nt // g.nt
        inc = spatial.reshape(g.nt, steps, g.nx).sum(axis=1)
        out.append((g, SheetIncrements(g, inc, int(seed))))
    return out


@dataclass(frozen=True)
class Control:
    """Cell-constant control ``v(t_j, x_i)`` on an ``nt x nx`` grid."""

    grid: GridSpec
    values: np.ndarray
    norm_sq: float = field(init=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.cell_shape:
            raise ValidationError(f"control shape {vals.shape} != {self.grid.cell_shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "norm_sq", _norm_sq(vals, self.grid))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.cell_shape))

    @classmethod
    def from_function(cls, grid, fn):
        """Sample ``fn(t, x)`` at time-cell midpoints and interior nodes."""
        tt, xx = np.meshgrid(grid.t_mid, grid.x, indexing="ij")
        return cls(grid, np.broadcast_to(fn(tt, xx), grid.cell_shape))

    def in_ball(self, N):
        """Membership in the closed L2 ball of radius-squared ``N``."""
        return self.norm_sq <= N

    def __add__(self, other):
        _same_grid(self.grid, other.grid)
        return Control(self.grid, self.values + other.values)

    def __mul__(self, c):
        return Control(self.grid, float(c) * self.values)

    __rmul__ = __mul__


def _same_grid(a, b):
    if a != b:
        raise ValidationError(f"grid mismatch: {a} vs {b}")


def _norm_sq(vals, grid):
    return float(np.sum(vals * vals) * grid.dx * grid.dt)


def control_norm_sq(v, grid):
    """Midpoint-rule value of the squared L2 norm over ``[0,T] x [0,1]``."""
    vals = v.values if isinstance(v, Control) else np.asarray(v, dtype=float)
    if vals.shape != grid.cell_shape:
        raise ValidationError(f"control shape {vals.shape} != {grid.cell_shape}")
    return _norm_sq(vals, grid)


def int_v(v, grid):
    """Cumulative integral of the control over ``[0, t] x [0, x]``.

    Entry ``(j, i)`` is the integral up to ``t_{j+1}`` and the right edge of
    node ``i``'s cell.
    """
    vals = v.values if isinstance(v, Control) else np.asarray(v, dtype=float)
    if vals.shape != grid.cell_shape:
        raise ValidationError(f"control shape {vals.shape} != {grid.cell_shape}")
    return np.cumsum(np.cumsum(vals, axis=0), axis=1) * (grid.dt * grid.dx)


def oscillatory_family(v, n, amplitude):
    """``v + amplitude * sin(n pi t / T)``, a sequence converging weakly to ``v``."""
    if int(n) != n or n < 1:
        raise ValidationError("n must be a positive integer")
    g = v.grid
    wave = np.sin(n * np.pi * g.t_mid / g.T)[:, None]
    return Control(g, v.values + amplitude * wave)


_MAGIC = b"SPDEFLD1"
_HEADER = struct.Struct("<8sqqdq?")


def save_field(path, grid, values, seed=None):
    """Write ``values`` (rows x nx) with a ``(nx, nt, T, seed)`` header.

    ``.csv`` paths get a text header row then one row per grid row, any other
    suffix gets a packed little-endian binary header followed by float64 data.
    """
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != grid.nx:
        raise ValidationError("values must be 2-D with nx columns")
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["nx", "nt", "T", "seed"])
            w.writerow([grid.nx, grid.nt, repr(float(grid.T)), "" if seed is None else int(seed)])
            for row in values:
                w.writerow([repr(float(a)) for a in row])
    else:
        has_seed = seed is not None
        head = _HEADER.pack(_MAGIC, grid.nx, grid.nt, float(grid.T),
                            int(seed) - 2**63 if has_seed else 0, has_seed)
        with path.open("wb") as fh:
            fh.write(head)
            fh.write(struct.pack("<q", values.shape[0]))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_field(path):
    """Inverse of :func:`save_field`; returns ``(grid, values, seed)``."""
    path = Path(path)
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != ["nx", "nt", "T", "seed"]:
            raise ValidationError(f"{path}: bad header {rows[0]}")
        nx, nt, T, seed = rows[1]
        grid = GridSpec(int(nx), int(nt), float(T))
        values = np.array([[float(a) for a in r] for r in rows[2:]]).reshape(-1, grid.nx)
        return grid, values, (int(seed) if seed else None)
    data = path.read_bytes()
    magic, nx, nt, T, seed, has_seed = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ValidationError(f"{path}: not a field file")
    (rows,) = struct.unpack_from("<q", data, _HEADER.size)
    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size + 8).reshape(rows, nx)
    grid = GridSpec(nx, nt, T)
    return grid, values.copy(), (seed + 2**63 if has_seed else None)

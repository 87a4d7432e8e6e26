"""Periodic grid fields, particle clouds, and continuity functionals.

The continuity monitors (modulus of continuity, Dini seminorm) operate on the
grid: the modulus is the sup over node pairs within each radius, exhaustive
for n <= 64 and sampled (>= 1e5 pairs, seeded) on finer grids.  The Dini
integral is cut off below at the grid spacing; sub-grid continuity is
unobservable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidArgument, MeanNotZero, NotBalanced
from .geometry import Domain
from .ops import grid_points, interp_periodic

EXHAUSTIVE_LIMIT = 64
MIN_SAMPLED_PAIRS = 100_000


@dataclass
class GridField:
    """Scalar field sampled at the nodes of a uniform periodic grid.

    values[i, j, ...] is the field at x = (i h, j h, ...), h = 1/n.
    Immutable by convention after construction.
    """

    values: np.ndarray
    bounds: tuple[float, float] | None = None  # declared density bounds (m, M)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("field values must be finite")
        n = self.values.shape[0]
        if any(s != n for s in self.values.shape):
            raise DimensionError("grid must have equal resolution per axis")
        if self.bounds is not None:
            m, M = self.bounds
            lo, hi = float(self.values.min()), float(self.values.max())
            if lo < m - 1e-12 or hi > M + 1e-12:
                raise InvalidArgument(
                    f"declared density bounds [{m}, {M}] violated by [{lo}, {hi}]")

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def mean(self) -> float:
        return float(np.mean(self.values))

    def mass(self) -> float:
        return self.mean()

    def sample(self, points, order: int = 1) -> np.ndarray:
        return interp_periodic(self.values, points, self.h, order=order)

    def nodes(self) -> np.ndarray:
        return grid_points(self.values.shape, self.h)

    # -- snapshot format: '# gridfield d=<d> n=<n> [kind=...]' then one value
    #    per line, row-major, 17 significant digits.
    def to_csv(self, path, kind: str | None = None) -> None:
        header = f"# gridfield d={self.d} n={self.n}"
        if kind:
            header += f" kind={kind}"
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for v in self.values.ravel(order="C"):
                fh.write(f"{v:.17g}\n")

    @staticmethod
    def from_csv(path) -> tuple["GridField", str | None]:
        with open(path) as fh:
            header = fh.readline().strip()
            if not header.startswith("# gridfield"):
                raise InvalidArgument(f"not a gridfield snapshot: {header!r}")
            meta = dict(tok.split("=") for tok in header.split()[2:])
            d, n = int(meta["d"]), int(meta["n"])
            vals = np.array([float(line) for line in fh if line.strip()])
        if vals.size != n ** d:
            raise InvalidArgument(f"expected {n ** d} values, got {vals.size}")
        return GridField(vals.reshape((n,) * d)), meta.get("kind")


@dataclass
class ParticleCloud:
    """Weighted Dirac measure: positions (N, d) and positive masses (N,)."""

    positions: np.ndarray
    masses: np.ndarray
    total: float = 1.0
    domain: Domain | None = field(default=None)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.masses = np.asarray(self.masses, dtype=float)
        if self.masses.ndim != 1 or self.masses.shape[0] != self.positions.shape[0]:
            raise DimensionError("positions and masses must have matching length")
        if np.any(self.masses <= 0):
            raise InvalidArgument("particle masses must be positive")
        if abs(float(self.masses.sum()) - self.total) > 1e-12:
            raise NotBalanced(
                f"masses sum to {self.masses.sum()}, declared total {self.total}")
        if self.domain is not None and not np.all(self.domain.contains(self.positions)):
            raise InvalidArgument("particle positions outside the declared domain")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(f"x{a + 1}" for a in range(self.d)) + ",mass\n")
            for p, m in zip(self.positions, self.masses):
                fh.write(",".join(f"{c:.17g}" for c in p) + f",{m:.17g}\n")

    @staticmethod
    def from_csv(path, total: float = 1.0) -> "ParticleCloud":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return ParticleCloud(data[:, :-1], data[:, -1], total=total)


# ---------------------------------------------------------------------------
# modulus of continuity and Dini seminorm


def _shift_table(shape, h):
    """Torus distance of every grid shift, flattened with shift indices."""
    axes = [np.arange(n) * h for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    dist = np.zeros(shape)
    for m in mesh:
        dm = np.minimum(m, 1.0 - m)
        dist = dist + dm * dm
    return np.sqrt(dist)


def _oscillation_by_shift(values: np.ndarray) -> np.ndarray:
    """max_x |f(x) - f(x + delta)| for every grid shift delta (exhaustive)."""
    n = values.shape[0]
    osc = np.zeros(values.shape)
    if values.ndim == 2:
        for di in range(n):
            a = np.roll(values, -di, axis=0)
            for dj in range(n):
                osc[di, dj] = np.abs(np.roll(a, -dj, axis=1) - values).max()
    else:
        for di in range(n):
            a = np.roll(values, -di, axis=0)
            for dj in range(n):
                b = np.roll(a, -dj, axis=1)
                for dk in range(n):
                    osc[di, dj, dk] = np.abs(np.roll(b, -dk, axis=2) - values).max()
    return osc


def _sampled_pair_distances(f: GridField, n_pairs: int, rng) -> tuple[np.ndarray, np.ndarray]:
    shape = f.values.shape
    size = f.values.size
    ia = rng.integers(0, size, n_pairs)
    ib = rng.integers(0, size, n_pairs)
    pa = np.stack(np.unravel_index(ia, shape), axis=-1) * f.h
    pb = np.stack(np.unravel_index(ib, shape), axis=-1) * f.h
    dd = np.abs(pa - pb)
    dd = np.minimum(dd, 1.0 - dd)
    dist = np.sqrt(np.sum(dd * dd, axis=-1))
    gap = np.abs(f.values.ravel()[ia] - f.values.ravel()[ib])
    return dist, gap


def modulus_of_continuity(f: GridField, radii, rng=None) -> np.ndarray:
    """w(r) = sup over node pairs with torus distance <= r of |f(x) - f(y)|.

    radii must lie in (0, 1/2 sqrt(d)] ... any positive sorted list is
    accepted; values beyond the torus diameter saturate at the full
    oscillation.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.size == 0:
        raise InvalidArgument("radii must be non-empty")
    if np.any(radii <= 0) or np.any(np.diff(radii) < 0):
        raise InvalidArgument("radii must be positive and sorted ascending")
    if f.n <= EXHAUSTIVE_LIMIT:
        dist = _shift_table(f.values.shape, f.h).ravel()
        osc = _oscillation_by_shift(f.values).ravel()
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        dist, osc = _sampled_pair_distances(f, MIN_SAMPLED_PAIRS, rng)
    order = np.argsort(dist, kind="stable")
    dist = dist[order]
    prefix = np.maximum.accumulate(osc[order])
    k = np.searchsorted(dist, radii, side="right") - 1
    w = np.where(k >= 0, prefix[np.clip(k, 0, None)], 0.0)
    return np.maximum.accumulate(w)  # enforce monotonicity across duplicate radii


def dini_integral(w: np.ndarray, radii: np.ndarray) -> float:
    """Quadrature of integral w(r)/r dr over the given radii (log-trapezoid)."""
    w = np.asarray(w, dtype=float)
    radii = np.asarray(radii, dtype=float)
    s = np.log(radii)
    return float(np.trapezoid(w, s))


def dini_radii(h: float, r_max: float = 1.0, m: int = 96) -> np.ndarray:
    """Log-spaced quadrature radii from the grid floor h up to r_max."""
    return np.exp(np.linspace(np.log(h), np.log(r_max), m))


def dini_seminorm(f: GridField, rng=None) -> float:
    """Numerical integral of w(r)/r dr over [h, 1] (grid-floor cutoff)."""
    radii = dini_radii(f.h)
    w = modulus_of_continuity(f, radii, rng=rng)
    return dini_integral(w, radii)


def linf_envelope(f: GridField) -> tuple[float, float]:
    """Exact grid (min, max)."""
    return float(f.values.min()), float(f.values.max())


def signed_split(f: GridField) -> tuple[GridField, GridField]:
    """Split a zero-mean field into positive and negative parts f = f+ - f-."""
    if abs(f.mean()) > 1e-10:
        raise MeanNotZero(f"field mean {f.mean()} exceeds 1e-10")
    pos = np.maximum(f.values, 0.0)
    neg = np.maximum(-f.values, 0.0)
    return GridField(pos), GridField(neg)

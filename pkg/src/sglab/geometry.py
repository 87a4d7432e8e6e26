"""Torus and bounded-domain primitives.

Points on the flat torus are represented by their canonical coordinates in
[0, 1)^d.  Box domains are required to have unit Lebesgue measure, matching
the normalization used throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidArgument, InvalidPoint


def wrap(x) -> np.ndarray:
    """Canonical torus representative: componentwise x mod 1, in [0, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidPoint(f"non-finite coordinates: {x}")
    r = np.mod(x, 1.0)
    # mod can round up to exactly 1.0 for tiny negative inputs
    return np.where(r >= 1.0, r - 1.0, r)


def torus_distance(x, y) -> float:
    """Distance on the flat torus: min over integer shifts of |x - y|."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    d = np.abs(wrap(x) - wrap(y))
    d = np.minimum(d, 1.0 - d)
    return np.sqrt(np.sum(d * d, axis=-1))


def torus_delta(x, y) -> np.ndarray:
    """Shortest displacement vector from y to x on the torus, in (-1/2, 1/2]^d."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = wrap(x) - wrap(y)
    return d - np.round(d)


def perp(v) -> np.ndarray:
    """Rotate the horizontal components a quarter turn.

    In 2-D, (v1, v2) -> (-v2, v1); in 3-D, (v1, v2, v3) -> (-v2, v1, 0).
    Acts on the last axis of the input.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    if d not in (2, 3):
        raise DimensionError(f"perp defined for d in {{2, 3}}, got d={d}")
    out = np.zeros_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class Domain:
    """Physical domain: flat torus or a unit-measure box.

    The box form stores explicit corners; unit measure is checked at
    construction.  `sup_radius` is the largest |y| over the domain, the
    constant entering the particle support-growth bound.
    """

    kind: str  # "torus" | "box"
    d: int
    lower: np.ndarray | None = field(default=None)
    upper: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("torus", "box"):
            raise InvalidArgument(f"unknown domain kind {self.kind!r}")
        if self.d not in (2, 3):
            raise DimensionError(f"domain dimension must be 2 or 3, got {self.d}")
        if self.kind == "box":
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.shape != (self.d,) or hi.shape != (self.d,):
                raise DimensionError("box corners must match the domain dimension")
            vol = float(np.prod(hi - lo))
            if abs(vol - 1.0) > 1e-12:
                raise InvalidArgument(f"box must have unit measure, got {vol}")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @staticmethod
    def torus(d: int) -> "Domain":
        return Domain(kind="torus", d=d)

    @staticmethod
    def box(lower, upper) -> "Domain":
        lower = np.asarray(lower, dtype=float)
        return Domain(kind="box", d=lower.shape[0], lower=lower, upper=np.asarray(upper, dtype=float))

    @staticmethod
    def centered_unit_box(d: int) -> "Domain":
        half = 0.5 * np.ones(d)
        return Domain(kind="box", d=d, lower=-half, upper=half)

    @property
    def measure(self) -> float:
        return 1.0

    def sup_radius(self) -> float:
        """sup over the domain of |y|."""
        if self.kind == "torus":
            # canonical chart [0,1)^d
            return float(np.sqrt(self.d))
        corners = np.stack(
            np.meshgrid(*[(self.lower[i], self.upper[i]) for i in range(self.d)], indexing="ij"),
            axis=-1,
        ).reshape(-1, self.d)
        return float(np.max(np.linalg.norm(corners, axis=1)))

    def centroid(self) -> np.ndarray:
        if self.kind == "torus":
            return 0.5 * np.ones(self.d)
        return 0.5 * (self.lower + self.upper)

    def contains(self, points, slack: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "torus":
            return np.all(np.isfinite(points), axis=1)
        return np.all((points >= self.lower - slack) & (points <= self.upper + slack), axis=1)

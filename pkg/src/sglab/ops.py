"""Shared discrete operators on uniform periodic grids.

All derivatives are built from the centered first difference D1 applied per
axis, so second derivatives are compositions D1a D1b.  Because these
operators commute and are skew-adjoint, the discrete determinant of
(I + D^2 p) integrates to exactly one over the torus for any periodic p in
2-D, and the cofactor-divergence identity holds exactly.  The price is a
small null space at the Nyquist frequencies, removed by `project_gauge`.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionError

# ---------------------------------------------------------------------------
# difference operators


def d1(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered first difference along `axis` with periodic wrap."""
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)


def grad(f: np.ndarray, h: float) -> np.ndarray:
    """Gradient, shape (d, *f.shape)."""
    return np.stack([d1(f, a, h) for a in range(f.ndim)])


def hessian(p: np.ndarray, h: float) -> np.ndarray:
    """Symmetric Hessian D1a D1b p, shape (d, d, *p.shape)."""
    d = p.ndim
    g = grad(p, h)
    H = np.empty((d, d) + p.shape)
    for a in range(d):
        for b in range(a, d):
            H[a, b] = d1(g[a], b, h)
            if b != a:
                H[b, a] = H[a, b]
    return H


def divergence(F: np.ndarray, h: float) -> np.ndarray:
    """Divergence of a vector field stacked on axis 0."""
    return sum(d1(F[a], a, h) for a in range(F.shape[0]))


def det_i_plus(H: np.ndarray) -> np.ndarray:
    """det(I + H) pointwise for a (d, d, ...) symmetric field."""
    d = H.shape[0]
    if d == 2:
        return (1.0 + H[0, 0]) * (1.0 + H[1, 1]) - H[0, 1] * H[1, 0]
    if d == 3:
        a = 1.0 + H[0, 0]
        b = H[0, 1]
        c = H[0, 2]
        e = 1.0 + H[1, 1]
        f = H[1, 2]
        g = 1.0 + H[2, 2]
        return a * (e * g - f * f) - b * (b * g - f * c) + c * (b * f - e * c)
    raise DimensionError(f"determinant implemented for d in {{2, 3}}, got {d}")


def comatrix_i_plus(H: np.ndarray) -> np.ndarray:
    """Cofactor matrix of (I + H) pointwise (equals adjugate for symmetric)."""
    d = H.shape[0]
    M = np.empty_like(H)
    if d == 2:
        M[0, 0] = 1.0 + H[1, 1]
        M[1, 1] = 1.0 + H[0, 0]
        M[0, 1] = -H[0, 1]
        M[1, 0] = -H[1, 0]
        return M
    if d == 3:
        a = 1.0 + H[0, 0]
        e = 1.0 + H[1, 1]
        g = 1.0 + H[2, 2]
        b, c, f = H[0, 1], H[0, 2], H[1, 2]
        M[0, 0] = e * g - f * f
        M[1, 1] = a * g - c * c
        M[2, 2] = a * e - b * b
        M[0, 1] = M[1, 0] = -(b * g - f * c)
        M[0, 2] = M[2, 0] = b * f - e * c
        M[1, 2] = M[2, 1] = -(a * f - b * c)
        return M
    raise DimensionError(f"cofactors implemented for d in {{2, 3}}, got {d}")


def min_eig_i_plus(H: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of (I + H) pointwise."""
    d = H.shape[0]
    if d == 2:
        a = 1.0 + H[0, 0]
        c = 1.0 + H[1, 1]
        b = H[0, 1]
        return 0.5 * ((a + c) - np.sqrt((a - c) ** 2 + 4.0 * b * b))
    # d == 3: vectorized symmetric eigensolve
    A = np.moveaxis(H, (0, 1), (-2, -1)).copy()
    for i in range(d):
        A[..., i, i] += 1.0
    return np.linalg.eigvalsh(A)[..., 0]


# ---------------------------------------------------------------------------
# Fourier-side helpers


def d1_symbols(shape, h: float) -> list[np.ndarray]:
    """Per-axis symbols sigma_a = sin(2 pi k_a h)/h of D1 (broadcastable).

    Entries that vanish in exact arithmetic (k = 0 and the Nyquist mode) are
    set to exactly zero; sin(pi) roundoff would otherwise turn null modes of
    D1 into 1e16-amplified noise.
    """
    d = len(shape)
    out = []
    for a, n in enumerate(shape):
        k = np.fft.fftfreq(n, d=1.0 / n)
        sig = np.sin(2.0 * np.pi * k * h) / h
        sig[np.mod(2 * k, n) == 0] = 0.0
        sh = [1] * d
        sh[a] = n
        out.append(sig.reshape(sh))
    return out


def project_gauge(p: np.ndarray) -> np.ndarray:
    """Remove mean and the Nyquist-corner modes invisible to D1 operators."""
    ph = np.fft.fftn(p)
    idx = []
    for n in p.shape:
        idx.append([0, n // 2] if n % 2 == 0 else [0])
    mesh = np.meshgrid(*idx, indexing="ij")
    ph[tuple(m.ravel() for m in mesh)] = 0.0
    return np.real(np.fft.ifftn(ph))


def solve_constant_coefficient(rhs: np.ndarray, coeff: np.ndarray, h: float) -> np.ndarray:
    """Solve sum_ab coeff[a,b] D1a D1b u = rhs in Fourier space (zero-mean gauge).

    `coeff` is a constant symmetric (d, d) matrix.  Modes where the symbol
    vanishes (mean, Nyquist corners) are set to zero.
    """
    sig = d1_symbols(rhs.shape, h)
    d = rhs.ndim
    symbol = np.zeros(rhs.shape)
    for a in range(d):
        for b in range(d):
            symbol = symbol - coeff[a, b] * sig[a] * sig[b]
    rh = np.fft.fftn(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        uh = np.where(symbol != 0.0, rh / symbol, 0.0)
    return np.real(np.fft.ifftn(uh))


def poisson_periodic_fd1(rhs: np.ndarray, h: float) -> np.ndarray:
    """Zero-mean solution of the D1-compatible discrete Poisson equation."""
    return solve_constant_coefficient(rhs, np.eye(rhs.ndim), h)


def poisson_periodic_exact(rhs: np.ndarray) -> np.ndarray:
    """Zero-mean solution of Laplace u = rhs with the exact spectral symbol."""
    d = rhs.ndim
    ks = []
    for a, n in enumerate(rhs.shape):
        k = np.fft.fftfreq(n, d=1.0 / n)
        sh = [1] * d
        sh[a] = n
        ks.append(k.reshape(sh))
    symbol = sum(-((2.0 * np.pi * k) ** 2) for k in ks)
    rh = np.fft.fftn(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        uh = np.where(symbol != 0.0, rh / symbol, 0.0)
    return np.real(np.fft.ifftn(uh))


def laplacian_exact(f: np.ndarray) -> np.ndarray:
    """Spectral Laplacian with the exact symbol (round trip of the above)."""
    d = f.ndim
    ks = []
    for a, n in enumerate(f.shape):
        k = np.fft.fftfreq(n, d=1.0 / n)
        sh = [1] * d
        sh[a] = n
        ks.append(k.reshape(sh))
    symbol = sum(-((2.0 * np.pi * k) ** 2) for k in ks)
    return np.real(np.fft.ifftn(symbol * np.fft.fftn(f)))


def gaussian_smooth_periodic(f: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian filter with standard deviation sigma in torus length units."""
    d = f.ndim
    ks = []
    for a, n in enumerate(f.shape):
        k = np.fft.fftfreq(n, d=1.0 / n)
        sh = [1] * d
        sh[a] = n
        ks.append(k.reshape(sh))
    k2 = sum((2.0 * np.pi * k) ** 2 for k in ks)
    return np.real(np.fft.ifftn(np.exp(-0.5 * sigma * sigma * k2) * np.fft.fftn(f)))


# ---------------------------------------------------------------------------
# interpolation, advection, deposition


def interp_periodic(values: np.ndarray, points: np.ndarray, h: float, order: int = 1) -> np.ndarray:
    """Evaluate a periodic grid field at arbitrary points.

    `points` has shape (..., d) in torus coordinates.  order=1 is monotone
    bilinear/trilinear; higher orders use periodic spline prefiltering.
    """
    pts = np.asarray(points, dtype=float)
    coords = [pts[..., a] / h for a in range(values.ndim)]
    return ndimage.map_coordinates(values, coords, order=order, mode="grid-wrap")


def grid_points(shape, h: float) -> np.ndarray:
    """Node coordinates, shape (*shape, d)."""
    axes = [np.arange(n) * h for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def advect_semi_lagrangian(field: np.ndarray, velocity: np.ndarray, dt: float, h: float,
                           order: int = 1) -> np.ndarray:
    """One transport step along `velocity` with midpoint characteristic backtracking.

    velocity is stacked on axis 0.  The departure point of each node is
    x - dt * v(x - dt/2 * v(x)); values are pulled back with periodic
    interpolation of the requested order.
    """
    x = grid_points(field.shape, h)
    v_node = np.stack([velocity[a] for a in range(x.shape[-1])], axis=-1)
    x_half = x - 0.5 * dt * v_node
    v_half = np.stack(
        [interp_periodic(velocity[a], x_half, h, order=order) for a in range(x.shape[-1])],
        axis=-1,
    )
    x_dep = x - dt * v_half
    return interp_periodic(field, x_dep, h, order=order)


def deposit_cic(points: np.ndarray, weights: np.ndarray, shape, h: float) -> np.ndarray:
    """Mass-conservative cloud-in-cell deposition onto a periodic grid.

    Returns a density field: total deposited weight divided by cell volume,
    so sum(out) * h^d equals sum(weights) exactly up to rounding.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    d = pts.shape[1]
    gi = pts / h
    base = np.floor(gi).astype(int)
    frac = gi - base
    out = np.zeros(shape)
    ns = np.array(shape)
    for corner in range(2 ** d):
        offs = np.array([(corner >> a) & 1 for a in range(d)])
        cw = w.copy()
        for a in range(d):
            cw = cw * (frac[:, a] if offs[a] else (1.0 - frac[:, a]))
        idx = tuple(((base[:, a] + offs[a]) % ns[a]) for a in range(d))
        np.add.at(out, idx, cw)
    return out / (h ** d)


def pairwise_sum(values: np.ndarray) -> float:
    """Deterministic pairwise reduction (numpy's summation is pairwise)."""
    return float(np.sum(values))

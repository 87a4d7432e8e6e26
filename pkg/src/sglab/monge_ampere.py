"""Periodic Monge-Ampere machinery: potentials, Newton solver, Legendre
transform, gradient maps, polar factorization, and the dual velocity field.

Potentials are stored through their periodic part p, the full potential being
|x|^2/2 + p(x).  The discrete determinant det(I + D^2 p) built from composed
centered first differences integrates to exactly one for any periodic p in
2-D, so the nonlinear system is solvable to near machine precision whenever
the target density has unit mean.  Newton steps solve the linearized
cofactor-form elliptic equation with a constant-coefficient spectral
preconditioner and GMRES.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import (ConvexityLost, InvalidArgument, InvalidDensity,
                     NoConvergence, ResolutionError)
from .fields import GridField
from .geometry import wrap
from .ops import (comatrix_i_plus, d1, deposit_cic, det_i_plus,
                  gaussian_smooth_periodic, grad, grid_points, hessian,
                  interp_periodic, min_eig_i_plus, poisson_periodic_fd1,
                  project_gauge, solve_constant_coefficient)

CONVEXITY_FLOOR = -1e-8


@dataclass
class ConvexPotential:
    """Potential |x|^2/2 + p(x) with p periodic and zero mean.

    flag is 'dual' for potentials whose gradient pushes the density to the
    uniform measure, 'primal' for the Legendre-dual direction.
    """

    p: np.ndarray
    flag: str = "dual"

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.flag not in ("dual", "primal"):
            raise InvalidArgument(f"unknown potential flag {self.flag!r}")

    @property
    def d(self) -> int:
        return self.p.ndim

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def displacement(self) -> np.ndarray:
        """grad of the periodic part: the map is x + displacement."""
        return grad(self.p, self.h)

    def hessian_periodic_part(self) -> np.ndarray:
        return hessian(self.p, self.h)

    def min_convexity_eig(self) -> float:
        return float(min_eig_i_plus(self.hessian_periodic_part()).min())

    def validate(self, eig_floor: float = CONVEXITY_FLOOR) -> None:
        if abs(float(self.p.mean())) > 1e-9:
            raise InvalidArgument("potential periodic part must have zero mean")
        ev = self.min_convexity_eig()
        if ev < eig_floor:
            raise ConvexityLost(f"discrete Hessian eigenvalue floor {ev} < {eig_floor}")

    def map_points(self, points, order: int = 3) -> np.ndarray:
        """Evaluate the gradient map at arbitrary torus points."""
        pts = np.asarray(points, dtype=float)
        disp = self.displacement()
        moved = pts + np.stack(
            [interp_periodic(disp[a], pts, self.h, order=order) for a in range(self.d)],
            axis=-1,
        )
        return wrap(moved)

    def to_field(self) -> GridField:
        return GridField(self.p)


def forward_determinant(p: np.ndarray, h: float) -> np.ndarray:
    """det(I + D^2 p) with the package's discrete Hessian (oracle direction)."""
    return det_i_plus(hessian(p, h))


# ---------------------------------------------------------------------------
# Newton core


def _jacobian_operator(M: np.ndarray, h: float, advect: np.ndarray | None):
    """Linearization delta -> sum_ab M_ab D1a D1b delta (+ advect . grad delta)."""
    d = M.shape[0]
    shape = M.shape[2:]

    def apply(vec):
        u = vec.reshape(shape)
        g = grad(u, h)
        out = np.zeros(shape)
        for a in range(d):
            for b in range(d):
                out += M[a, b] * d1(g[a], b, h)
        if advect is not None:
            for a in range(d):
                out += advect[a] * g[a]
        return out.ravel()

    size = int(np.prod(shape))
    return LinearOperator((size, size), matvec=apply)


def _preconditioner(M: np.ndarray, h: float):
    d = M.shape[0]
    coeff = np.array([[float(M[a, b].mean()) for b in range(d)] for a in range(d)])
    shape = M.shape[2:]

    def apply(vec):
        return solve_constant_coefficient(vec.reshape(shape), coeff, h).ravel()

    size = int(np.prod(shape))
    return LinearOperator((size, size), matvec=apply)


def _newton_det(target: np.ndarray, h: float, p0: np.ndarray,
                residual_fn, jacobian_fn, tol: float,
                max_newton: int = 60, max_halvings: int = 20) -> np.ndarray:
    """Damped Newton for residual_fn(p) = target, in the zero-mean gauge."""
    p = project_gauge(p0)
    F = residual_fn(p)
    r = target - F
    best = np.linalg.norm(r, np.inf)
    for _ in range(max_newton):
        rinf = np.linalg.norm(r, np.inf)
        if rinf <= tol:
            return p
        M, advect = jacobian_fn(p)
        op = _jacobian_operator(M, h, advect)
        prec = _preconditioner(M, h)
        sol, info = gmres(op, r.ravel(), rtol=1e-6, atol=1e-16, restart=60,
                          maxiter=300, M=prec)
        if info != 0 and np.linalg.norm(sol) == 0.0:
            raise NoConvergence("linearized solve failed", residual=rinf)
        delta = project_gauge(sol.reshape(p.shape))
        r2 = np.linalg.norm(r)
        alpha = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = p + alpha * delta
            F_new = residual_fn(cand)
            r_new = target - F_new
            if np.linalg.norm(r_new) <= (1.0 - 0.25 * alpha) * r2:
                p, r = project_gauge(cand), r_new
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise NoConvergence("Newton stagnation", residual=rinf)
        best = min(best, np.linalg.norm(r, np.inf))
    if np.linalg.norm(r, np.inf) <= tol:
        return p
    raise NoConvergence("Newton iteration limit", residual=float(np.linalg.norm(r, np.inf)))


def _validate_density(rho: GridField, positivity: bool = True) -> None:
    if positivity and rho.values.min() <= 0.0:
        raise InvalidDensity(f"density minimum {rho.values.min()} is not positive")
    if abs(rho.mean() - 1.0) > 1e-10:
        raise InvalidDensity(f"density mean {rho.mean()} is not 1 within 1e-10")
    if rho.n < 16:
        raise InvalidArgument(f"resolution n={rho.n} below the supported minimum 16")


def solve_ma_periodic(rho: GridField, tol: float = 1e-10,
                      warm_start: ConvexPotential | None = None,
                      max_newton: int = 60) -> ConvexPotential:
    """Solve det(I + D^2 p) = rho for the dual potential |x|^2/2 + p.

    Starts from the linearized (Poisson) solution, or a warm start, and falls
    back to homotopy continuation rho_t = 1 + t(rho - 1) if the direct solve
    stagnates.
    """
    _validate_density(rho)
    h = rho.h

    def residual_fn(p):
        return det_i_plus(hessian(p, h))

    def jacobian_fn(p):
        return comatrix_i_plus(hessian(p, h)), None

    def attempt(target, p0):
        return _newton_det(target, h, p0, residual_fn, jacobian_fn, tol,
                           max_newton=max_newton)

    seed = warm_start.p if warm_start is not None else poisson_periodic_fd1(rho.values - 1.0, h)
    try:
        p = attempt(rho.values, seed)
    except NoConvergence:
        # adaptive continuation from the uniform density
        p = np.zeros_like(rho.values)
        t, step = 0.0, 0.5
        while t < 1.0:
            t_next = min(1.0, t + step)
            target = 1.0 + t_next * (rho.values - 1.0)
            try:
                p = attempt(target, p)
                t = t_next
                step = min(2.0 * step, 1.0 - t) if t < 1.0 else step
            except NoConvergence as exc:
                step *= 0.5
                if step < 1e-3:
                    raise NoConvergence(
                        "continuation exhausted", residual=exc.residual) from exc
    pot = ConvexPotential(p, flag="dual")
    pot.validate()
    return pot


def solve_ot_map(rho1: GridField, rho2: GridField, tol: float = 1e-7,
                 max_newton: int = 60, interp_order: int = 3) -> ConvexPotential:
    """Potential phi with grad(phi) pushing rho1 to rho2 optimally.

    Solves det(I + D^2 p) * rho2(x + grad p) = rho1 by damped Newton; rho2 is
    evaluated off-grid with periodic spline interpolation, so the attainable
    residual floor is set by interpolation consistency rather than the Newton
    tolerance alone.
    """
    _validate_density(rho1)
    _validate_density(rho2)
    if rho1.n != rho2.n or rho1.d != rho2.d:
        raise InvalidArgument("densities must share one grid")
    h = rho1.h
    x = grid_points(rho1.values.shape, h)
    g2 = grad(rho2.values, h)

    def transported(p):
        disp = grad(p, h)
        pts = x + np.stack([disp[a] for a in range(rho1.d)], axis=-1)
        r2 = interp_periodic(rho2.values, pts, h, order=interp_order)
        return pts, r2

    def residual_fn(p):
        _, r2 = transported(p)
        return det_i_plus(hessian(p, h)) * r2

    def jacobian_fn(p):
        H = hessian(p, h)
        pts, r2 = transported(p)
        M = comatrix_i_plus(H) * r2[None, None]
        det = det_i_plus(H)
        advect = np.stack(
            [det * interp_periodic(g2[a], pts, h, order=interp_order)
             for a in range(rho1.d)])
        return M, advect

    def attempt(target, p0):
        return _newton_det(target, h, p0, residual_fn, jacobian_fn, tol,
                           max_newton=max_newton)

    seed = poisson_periodic_fd1(rho1.values - rho2.values, h)
    try:
        p = attempt(rho1.values, seed)
    except NoConvergence:
        # continuation: march the target density from rho1 to rho2
        p = np.zeros_like(rho1.values)
        t, step = 0.0, 0.5
        while t < 1.0:
            t_next = min(1.0, t + step)
            mix = GridField((1.0 - t_next) * rho1.values + t_next * rho2.values)
            try:
                p = solve_ot_map_fixed(rho1, mix, tol, p, max_newton, interp_order)
                t = t_next
            except NoConvergence as exc:
                step *= 0.5
                if step < 1e-3:
                    raise NoConvergence(
                        "continuation exhausted", residual=exc.residual) from exc
    pot = ConvexPotential(p, flag="primal")
    pot.validate()
    return pot


def solve_ot_map_fixed(rho1: GridField, rho2: GridField, tol: float, p0: np.ndarray,
                       max_newton: int = 60, interp_order: int = 3) -> np.ndarray:
    """Single Newton attempt for the optimal-map equation from a given seed."""
    h = rho1.h
    x = grid_points(rho1.values.shape, h)
    g2 = grad(rho2.values, h)

    def transported(p):
        disp = grad(p, h)
        pts = x + np.stack([disp[a] for a in range(rho1.d)], axis=-1)
        return pts, interp_periodic(rho2.values, pts, h, order=interp_order)

    def residual_fn(p):
        _, r2 = transported(p)
        return det_i_plus(hessian(p, h)) * r2

    def jacobian_fn(p):
        H = hessian(p, h)
        pts, r2 = transported(p)
        M = comatrix_i_plus(H) * r2[None, None]
        det = det_i_plus(H)
        advect = np.stack(
            [det * interp_periodic(g2[a], pts, h, order=interp_order)
             for a in range(rho1.d)])
        return M, advect

    return _newton_det(rho1.values, h, p0, residual_fn, jacobian_fn, tol,
                       max_newton=max_newton)


# ---------------------------------------------------------------------------
# Legendre transform


def _min_conv_axis(m: np.ndarray, axis: int, h: float, refine: bool) -> np.ndarray:
    """1-D quadratic min-convolution along `axis` over a 3-period window.

    out[a, ...] = min_s ((s - a) h)^2 / 2 + m[s mod n, ...], with optional
    parabolic sub-grid refinement around the discrete argmin.
    """
    m = np.moveaxis(m, axis, 0)
    n = m.shape[0]
    rest = m.shape[1:]
    unf = np.concatenate([m, m, m], axis=0)  # sources at (s - n) h, s in [0, 3n)
    s_idx = np.arange(3 * n) - n
    a_idx = np.arange(n)
    cost = 0.5 * ((s_idx[None, :] - a_idx[:, None]) * h) ** 2  # (n, 3n)
    flat = unf.reshape(3 * n, -1)
    total = cost[:, :, None] + flat[None, :, :]  # (n, 3n, rest)
    kmin = np.argmin(total, axis=1)
    take = np.take_along_axis(total, kmin[:, None, :], axis=1)[:, 0, :]
    if refine:
        km = np.clip(kmin, 1, 3 * n - 2)
        g0 = np.take_along_axis(total, km[:, None, :], axis=1)[:, 0, :]
        gm = np.take_along_axis(total, (km - 1)[:, None, :], axis=1)[:, 0, :]
        gp = np.take_along_axis(total, (km + 1)[:, None, :], axis=1)[:, 0, :]
        curv = gp - 2.0 * g0 + gm
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(curv > 1e-14, (gp - gm) ** 2 / (8.0 * curv), 0.0)
        take = np.minimum(take, g0 - corr)
    out = take.reshape((n,) + rest)
    return np.moveaxis(out, 0, axis)


def legendre_transform(pot: ConvexPotential, refine: bool = True) -> ConvexPotential:
    """Legendre transform within the class of |x|^2/2 + periodic potentials.

    Computed as a separable quadratic lower envelope over grid nodes unfolded
    to three periods per axis (admissible because gradient displacements are
    bounded by sqrt(d)/2), with parabolic refinement of each 1-D minimum.
    """
    m = pot.p.copy()
    h = pot.h
    for axis in range(pot.d):
        m = _min_conv_axis(m, axis, h, refine)
    q = project_gauge(-m)
    return ConvexPotential(q, flag="primal" if pot.flag == "dual" else "dual")


# ---------------------------------------------------------------------------
# gradient maps and polar factorization


def gradient_map(pot: ConvexPotential) -> np.ndarray:
    """Gradient map at grid nodes: x + grad p, wrapped. Shape (*grid, d)."""
    disp = pot.displacement()
    x = grid_points(pot.p.shape, pot.h)
    return wrap(x + np.stack([disp[a] for a in range(pot.d)], axis=-1))


def dual_velocity(pot: ConvexPotential) -> np.ndarray:
    """Dual-space velocity perp(grad Psi - x), stacked on axis 0."""
    if pot.flag != "dual":
        raise InvalidArgument("dual_velocity requires a dual-flag potential")
    disp = pot.displacement()
    v = np.zeros((pot.d,) + pot.p.shape)
    v[0] = -disp[1]
    v[1] = disp[0]
    return v


def pushforward_density(points: np.ndarray, weights: np.ndarray, n: int,
                        min_floor: float = 1e-3, max_sigma_steps: int = 6):
    """Deposit a weighted point set and smooth until strictly positive.

    Returns (density GridField with unit mean, sigma used).  Raises
    ResolutionError when positivity would require smoothing beyond a quarter
    of the domain.
    """
    d = points.shape[-1]
    h = 1.0 / n
    dens = deposit_cic(points.reshape(-1, d), np.asarray(weights).ravel(), (n,) * d, h)
    sigma = 0.0
    vals = dens
    width = h
    for _ in range(max_sigma_steps + 1):
        if vals.min() > min_floor:
            field = GridField(vals / vals.mean())
            return field, sigma
        sigma = width
        vals = gaussian_smooth_periodic(dens, sigma)
        width *= 2.0
        if sigma > 0.25:
            break
    raise ResolutionError("image mass concentrated below grid resolution")


def polar_factorize(displacement: np.ndarray, tol: float = 1e-8,
                    density_floor: float = 1e-3):
    """Polar factorization X = grad Phi o g of a periodic grid map.

    `displacement` is stacked (d, *grid); the map is X(x) = x + displacement.
    Returns (Phi: ConvexPotential primal, g: array (*grid, d), diagnostics).
    g is measure preserving up to deposition tolerance.
    """
    d = displacement.shape[0]
    shape = displacement.shape[1:]
    n = shape[0]
    h = 1.0 / n
    x = grid_points(shape, h)
    X = wrap(x + np.stack([displacement[a] for a in range(d)], axis=-1))
    rho, sigma = pushforward_density(X.reshape(-1, d), np.full(X[..., 0].size, h ** d),
                                     n, min_floor=density_floor)
    psi = solve_ma_periodic(rho, tol=tol)
    phi = legendre_transform(psi)
    disp_psi = psi.displacement()
    g = wrap(X + np.stack(
        [interp_periodic(disp_psi[a], X, h, order=3) for a in range(d)], axis=-1))
    g_hist = deposit_cic(g.reshape(-1, d), np.full(g[..., 0].size, h ** d), shape, h)
    diagnostics = {
        "smoothing_sigma": sigma,
        "uniformity_defect": float(np.abs(g_hist - 1.0).max()),
        "ma_residual": float(np.abs(forward_determinant(psi.p, h) - rho.values).max()),
    }
    return phi, g, diagnostics

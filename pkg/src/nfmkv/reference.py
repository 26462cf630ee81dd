"""Finite-difference HJB/FPK solver for the ring-road traffic game.

Value equation (backward, u(T) = 0):
    u_t + (s^2/2) u_xx + (1 - mu) u_x - u_x^2 / 2 = 0
Density equation (forward):
    mu_t - (s^2/2) mu_xx + (mu b)_x = 0,   b = 1 - mu - u_x

Both sweeps are implicit and upwinded on the sign of the optimal speed, which
gives monotone (M-matrix) steps without a CFL restriction.  The FPK update is
in conservative flux form, so mass is preserved to round-off.  The two sweeps are coupled by a damped Picard
iteration on the density path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffcore import InvalidInputError
from .flows import BaseDensity
from .problems import _ring_base
from .sde import TimeGrid

LOG_FLOOR = -16.0
DENSITY_FLOOR = 1e-8


class PicardDivergenceError(RuntimeError):
    def __init__(self, message, residuals):
        self.residuals = list(residuals)
        super().__init__(f"{message}; residual history tail: {self.residuals[-5:]}")


@dataclass
class ReferenceSolution:
    J: int
    grid: TimeGrid
    sigma: float
    density: np.ndarray  # (N+1, J)
    value: np.ndarray  # (N+1, J)
    picard_residual: float
    residuals: list = field(default_factory=list)

    @property
    def dx(self) -> float:
        return 1.0 / self.J

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.J) + 0.5) / self.J

    def mass(self) -> np.ndarray:
        return self.density.sum(1) * self.dx


def _periodic_laplacian(J: int, dx: float) -> sparse.csr_matrix:
    main = -2.0 * np.ones(J)
    off = np.ones(J)
    L = sparse.diags([main, off[:-1], off[:-1]], [0, 1, -1], format="lil")
    L[0, J - 1] = L[J - 1, 0] = 1.0
    return (L / dx**2).tocsr()


def _shift(J: int, k: int) -> sparse.csr_matrix:
    """(S u)_j = u_{j+k} on the periodic grid."""
    cols = (np.arange(J) + k) % J
    return sparse.csr_matrix((np.ones(J), (np.arange(J), cols)), shape=(J, J))


def _upwind_gradient(u, speed, dx):
    fwd = (np.roll(u, -1) - u) / dx
    bwd = (u - np.roll(u, 1)) / dx
    return np.where(speed > 0, fwd, bwd)


def _hjb_sweep(density, grid, diffusion, shifts, dx):
    """Policy-linearised implicit step: the speed comes from u^{n+1}, transport and diffusion act on u^n."""
    J = density.shape[1]
    eye = sparse.identity(J, format="csr")
    right, left = shifts
    u = np.zeros_like(density)
    for n in range(grid.N - 1, -1, -1):
        mu = density[n]
        guess = 1.0 - mu - 0.5 * (np.roll(u[n + 1], -1) - np.roll(u[n + 1], 1)) / dx
        p = _upwind_gradient(u[n + 1], guess, dx)
        speed = 1.0 - mu - p
        pos, neg = np.maximum(speed, 0.0), np.minimum(speed, 0.0)
        # speed * D_upwind u, with D+ where speed > 0 and D- otherwise
        transport = (sparse.diags(pos) @ (right - eye) + sparse.diags(neg) @ (eye - left)) / dx
        A = eye - grid.dt * (diffusion + transport)
        rhs = u[n + 1] + grid.dt * 0.5 * (1.0 - mu - speed) ** 2
        u[n] = spsolve(A.tocsc(), rhs)
    return u


def _face_speed(mu, u, dx):
    mu_face = 0.5 * (mu + np.roll(mu, -1))
    return 1.0 - mu_face - (np.roll(u, -1) - u) / dx


def _fpk_sweep(mu0, value, grid, diffusion, shifts, dx):
    """Implicit conservative upwind step; face speeds are frozen at step n."""
    J = mu0.size
    eye = sparse.identity(J, format="csr")
    right, left = shifts
    mu = np.empty((grid.N + 1, J))
    mu[0] = mu0
    for n in range(grid.N):
        b = _face_speed(mu[n], value[n], dx)
        pos, neg = sparse.diags(np.maximum(b, 0.0)), sparse.diags(np.minimum(b, 0.0))
        flux = pos + neg @ right  # F_{j+1/2} as a linear map of mu
        div = (flux - left @ flux) / dx
        A = eye - grid.dt * diffusion + grid.dt * div
        mu[n + 1] = spsolve(A.tocsc(), mu[n])
    return mu


def discretize_density(base: BaseDensity, J: int, sub: int = 64) -> np.ndarray:
    """Cell averages of a ring density, renormalised to unit discrete mass."""
    x = (np.arange(J * sub) + 0.5) / (J * sub)
    vals = base.density_np(x).reshape(J, sub).mean(1)
    return vals / (vals.sum() / J)


def solve_traffic_fd(J: int = 128, grid: TimeGrid | None = None, sigma: float = 0.5, mu0_spec=None,
                     picard_tol: float = 1e-7, max_picard: int = 500, damping: float = 0.5,
                     substeps: int = 8) -> ReferenceSolution:
    """Damped Picard iteration between the backward HJB and forward FPK sweeps.

    The sweeps march on ``substeps`` internal steps per interval of ``grid``;
    the returned arrays are sampled back onto ``grid``.
    """
    if J < 16:
        raise InvalidInputError("J must be at least 16")
    if int(substeps) != substeps or substeps < 1:
        raise InvalidInputError("substeps must be a positive integer")
    outer_grid = grid or TimeGrid(1.0, 50)
    grid = TimeGrid(outer_grid.T, outer_grid.N * int(substeps))
    if not picard_tol > 0:
        raise InvalidInputError("picard_tol must be positive")
    base = _ring_base(mu0_spec)
    dx = 1.0 / J
    diffusion = 0.5 * sigma**2 * _periodic_laplacian(J, dx)
    shifts = (_shift(J, 1), _shift(J, -1))
    mu0 = discretize_density(base, J)
    density = np.tile(mu0, (grid.N + 1, 1))
    residuals = []
    value = None
    for _ in range(max_picard):
        value = _hjb_sweep(density, grid, diffusion, shifts, dx)
        new = _fpk_sweep(mu0, value, grid, diffusion, shifts, dx)
        res = float(np.abs(new - density).max())
        residuals.append(res)
        density = (1.0 - damping) * density + damping * new
        if not np.isfinite(res):
            raise PicardDivergenceError("Picard iteration produced non-finite values", residuals)
        if res < picard_tol:
            value = _hjb_sweep(density, grid, diffusion, shifts, dx)
            k = int(substeps)
            return ReferenceSolution(J, outer_grid, float(sigma), density[::k].copy(), value[::k].copy(), res,
                                     residuals)
    raise PicardDivergenceError(f"no convergence after {max_picard} Picard iterations", residuals)


def log_error(mu_net, ref: ReferenceSolution) -> dict:
    """log10 relative error of a density callback ``mu_net(x, n)`` against the reference grid."""
    x = ref.x
    eps = np.empty_like(ref.density)
    for n in range(ref.grid.N + 1):
        approx = np.asarray(mu_net(x, n), dtype=float)
        rel = np.abs(approx - ref.density[n]) / np.maximum(ref.density[n], DENSITY_FLOOR)
        with np.errstate(divide="ignore"):
            eps[n] = np.maximum(np.log10(rel), LOG_FLOOR)
    return {"eps": eps, "max": float(eps.max()), "mean": float(eps.mean())}


def _restrict(fine: np.ndarray, coarse_j: int) -> np.ndarray:
    return fine.reshape(coarse_j, -1).mean(1)


def refinement_ratio(grid: TimeGrid, sigma: float, mu0_spec=None, coarse: int = 64, ref_level: int = 512,
                     **kw) -> dict:
    """Error reduction e_J / e_2J of the terminal density when J doubles from ``coarse``.

    The exact solution is replaced by the first-order Richardson extrapolation
    2 mu_{2R} - mu_R built from two fine grids R = ``ref_level`` and 2R.  A
    first-order scheme gives a ratio near 2.
    """
    levels = (coarse, 2 * coarse, ref_level, 2 * ref_level)
    if ref_level % (2 * coarse):
        raise InvalidInputError("ref_level must be a multiple of 2 * coarse")
    final = {J: solve_traffic_fd(J, grid, sigma, mu0_spec, **kw).density[-1] for J in levels}
    exact = 2.0 * final[2 * ref_level] - np.repeat(final[ref_level], 2)
    errors = [float(np.abs(_restrict(exact, J) - final[J]).max()) for J in levels[:2]]
    return {"levels": list(levels[:2]), "errors": errors, "ratio": errors[0] / errors[1]}


class TrafficReferenceSolver(BaseEstimator):
    """Estimator wrapper around :func:`solve_traffic_fd`.

    ``fit()`` takes no data; the fitted density path is exposed as
    ``density_`` and can be queried with :meth:`predict`.
    """

    def __init__(self, J=128, T=1.0, N=50, sigma=0.5, mu0=None, picard_tol=1e-7, max_picard=500, damping=0.5,
                 substeps=8):
        self.J = J
        self.T = T
        self.N = N
        self.sigma = sigma
        self.mu0 = mu0
        self.picard_tol = picard_tol
        self.max_picard = max_picard
        self.damping = damping
        self.substeps = substeps

    def fit(self, X=None, y=None):
        self.solution_ = solve_traffic_fd(self.J, TimeGrid(self.T, self.N), self.sigma, self.mu0,
                                          self.picard_tol, self.max_picard, self.damping, self.substeps)
        self.density_ = self.solution_.density
        self.value_ = self.solution_.value
        return self

    def predict(self, X, step: int = -1):
        """Density at positions ``X`` (ring coordinates) and time step ``step`` by periodic interpolation."""
        check_is_fitted(self, "solution_")
        x = np.mod(np.asarray(X, dtype=float).reshape(-1), 1.0)
        sol = self.solution_
        xp = np.concatenate([[sol.x[-1] - 1.0], sol.x, [sol.x[0] + 1.0]])
        row = sol.density[step]
        fp = np.concatenate([[row[-1]], row, [row[0]]])
        return np.interp(x, xp, fp)

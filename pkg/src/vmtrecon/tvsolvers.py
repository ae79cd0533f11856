"""Total-variation functionals and the two TV solvers used by the model."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg
from skimage.feature import canny

from .grid import divergence, gradient

log = logging.getLogger(__name__)


def gradient_norm(f):
    g = gradient(f)
    return np.sqrt(g[0] ** 2 + g[1] ** 2)


def tv(f):
    """Isotropic total variation ``sum |grad f|``."""
    return float(np.sum(gradient_norm(f)))


def weighted_tv(f, g):
    """``sum g * |grad f|``."""
    return float(np.sum(np.asarray(g, dtype=float) * gradient_norm(f)))


def canny_weights(recon, sigma=1.5, low_thresh=0.1, high_thresh=0.2, floor_c=0.01):
    """Edge weights from a Canny detector run on ``G_sigma * recon``.

    Thresholds are fractions of the largest smoothed gradient magnitude.
    Edge pixels get ``floor_c``, all others ``1``.
    """
    if not 0 < floor_c < 1:
        raise ValueError(f"floor_c must lie in (0, 1), got {floor_c}")
    recon = np.asarray(recon, dtype=float)
    smoothed = ndimage.gaussian_filter(recon, sigma, mode="nearest")
    mag = np.hypot(ndimage.sobel(smoothed, axis=0), ndimage.sobel(smoothed, axis=1))
    peak = float(mag.max())
    if not np.isfinite(peak) or peak <= 1e-12 * max(1.0, float(np.abs(recon).max())):
        return np.ones_like(recon)
    edges = canny(recon / peak, sigma=sigma, low_threshold=low_thresh, high_threshold=high_thresh, mode="nearest")
    return np.where(edges, floor_c, 1.0)


def prox_energy(f, h, theta, g):
    """``1/(2 theta) |f - h|^2 + TV_g(f)``."""
    return float(np.sum((f - h) ** 2)) / (2.0 * theta) + weighted_tv(f, g)


def chambolle_prox(h, theta, g=1.0, iters=500, step=0.125, p0=None, tol=1e-6, return_dual=False, callback=None):
    """Chambolle's dual projection iteration for ``min 1/(2 theta)|f - h|^2 + TV_g(f)``.

    The dual field keeps ``|p| <= g`` pointwise after every update. The loop
    stops early once the largest dual change falls below ``tol``.

    Parameters
    ----------
    h : ndarray
        Data image.
    theta : float
        Fidelity scale.
    g : float or ndarray
        TV weight, scalar or per pixel.
    iters : int
        Maximum number of dual updates.
    step : float
        Dual step, at most 1/8 for guaranteed convergence.
    p0 : ndarray, optional
        Warm start for the dual field; zero by default.
    callback : callable, optional
        Called as ``callback(n, f, p)`` after each update.

    Returns
    -------
    f : ndarray
        ``h - theta * div p``.
    p : ndarray
        The final dual field (only with ``return_dual=True``).
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    h = np.asarray(h, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), h.shape)
    p = np.zeros((2,) + h.shape) if p0 is None else np.array(p0, dtype=float)
    hs = h / theta
    for n in range(iters):
        q = gradient(divergence(p) - hs)
        nq = np.sqrt(q[0] ** 2 + q[1] ** 2)
        p_new = (p + step * q) / (1.0 + (step / g) * nq)
        change = float(np.max(np.abs(p_new - p)))
        p = p_new
        if callback is not None:
            callback(n, h - theta * divergence(p), p)
        if change < tol:
            break
    f = h - theta * divergence(p)
    if return_dual:
        return f, p
    return f


def conjugate_gradient(apply_A, b, x0=None, tol=1e-8, maxiter=200, precond=None):
    """CG on image-shaped arrays; returns ``(x, relative_residual)``."""
    shape = b.shape
    n = b.size
    A = LinearOperator((n, n), matvec=lambda x: apply_A(x.reshape(shape)).ravel(), dtype=float)
    M = None
    if precond is not None:
        M = LinearOperator((n, n), matvec=lambda x: precond(x.reshape(shape)).ravel(), dtype=float)
    bn = float(np.linalg.norm(b))
    if bn == 0.0:
        return np.zeros(shape), 0.0
    x, info = cg(A, b.ravel(), x0=None if x0 is None else x0.ravel(), rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    x = x.reshape(shape)
    res = float(np.linalg.norm(apply_A(x) - b)) / bn
    if info != 0 and res > tol:
        warnings.warn(f"CG stopped at relative residual {res:.3g} (tol {tol:g})", RuntimeWarning, stacklevel=2)
    return x, res


def tv_objective(u, w, b, alpha, apply_C):
    r = apply_C(u) - b
    return 0.5 * w * float(np.sum(r * r)) + alpha * tv(u)


def primal_dual_tv(w, b, alpha, apply_C, apply_C_adjoint, iters=500, tau=None, sigma_pd=None,
                   u0=None, y0=None, cg_tol=1e-8, cg_max=200, solve_normal=None, tol=1e-7,
                   return_info=False):
    """Primal-dual (Chambolle-Pock) solver for ``min w/2 |C u - b|^2 + alpha TV(u)``.

    The dual variable lives in the ball of radius ``alpha`` and the primal step inverts
    ``I + tau*w*C^T C``. That solve uses conjugate gradients unless
    ``solve_normal(r, c)`` (returning ``(I + c C^T C)^{-1} r``) is supplied.

    Iteration stops at ``iters`` or once the relative primal change drops
    below ``tol``. With ``return_info=True`` a dict with the dual field,
    iteration count and worst CG residual is returned as well.
    """
    b = np.asarray(b, dtype=float)
    if tau is None:
        tau = 1.0 / np.sqrt(8.0)
    if sigma_pd is None:
        sigma_pd = 1.0 / np.sqrt(8.0)
    if tau * sigma_pd * 8.0 > 1.0 + 1e-12:
        raise ValueError("step sizes violate tau * sigma * 8 <= 1")
    Ctb = apply_C_adjoint(b)
    u = Ctb.copy() if u0 is None else np.array(u0, dtype=float)
    y = np.zeros((2,) + u.shape) if y0 is None else np.array(y0, dtype=float)
    u_bar = u.copy()
    c = tau * w
    worst = 0.0

    def solve(r, x0):
        nonlocal worst
        if solve_normal is not None:
            return solve_normal(r, c)
        x, res = conjugate_gradient(lambda v: v + c * apply_C_adjoint(apply_C(v)), r, x0=x0, tol=cg_tol, maxiter=cg_max)
        worst = max(worst, res)
        return x

    n = 0
    for n in range(1, iters + 1):
        y = y + sigma_pd * gradient(u_bar)
        if alpha > 0:
            y /= np.maximum(1.0, np.sqrt(y[0] ** 2 + y[1] ** 2) / alpha)
        else:
            y[:] = 0.0
        u_old = u
        u = solve(u + tau * divergence(y) + c * Ctb, u_old)
        u_bar = 2.0 * u - u_old
        if tol and np.linalg.norm(u - u_old) <= tol * max(np.linalg.norm(u), 1e-30):
            break
    if return_info:
        return u, {"dual": y, "iterations": n, "cg_residual": worst}
    return u

"""Hyperelastic (Ogden-type) deformable registration.

Deformations are stored as displacements ``v`` with ``phi = Id + v`` on the
frame grid. Displacements vanish on the outermost ring of pixels, so the
map is the identity on the boundary.

The auxiliary field ``z`` (shape ``(2, 2, ny, nx)``) tracks the
displacement gradient; the stored energy is evaluated at ``I + z``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from . import grid

log = logging.getLogger(__name__)


@dataclass
class Deformation:
    """``phi = Id + displacement`` with ``displacement`` of shape ``(2, ny, nx)``."""

    displacement: np.ndarray

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=float)
        if self.displacement.ndim != 3 or self.displacement.shape[0] != 2:
            raise ValueError(f"displacement must have shape (2, ny, nx), got {self.displacement.shape}")

    @classmethod
    def identity(cls, shape):
        return cls(np.zeros((2,) + tuple(shape)))

    @property
    def shape(self):
        return self.displacement.shape[1:]

    def jacobian(self):
        return grid.jacobian(self.displacement)

    def det(self):
        return grid.determinant(self.jacobian())

    def targets(self):
        """Absolute ``(y, x)`` coordinates ``phi(x)`` for every pixel."""
        return grid.identity_coords(self.shape) + self.displacement

    def copy(self):
        return Deformation(self.displacement.copy())


@dataclass(frozen=True)
class OgdenParams:
    a1: float = 1.0
    a2: float = 50.0

    def __post_init__(self):
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError(f"Ogden coefficients must be positive, got a1={self.a1}, a2={self.a2}")


def ogden_density(F, p):
    """Pointwise stored energy ``a1 |F|^4 + a2 (det F - 1/det F)^4``; ``inf`` where ``det F <= 0``."""
    F = np.asarray(F, dtype=float)
    det = grid.determinant(F)
    fro2 = np.sum(F * F, axis=(0, 1))
    out = np.full(det.shape, np.inf)
    ok = det > 0
    d = det[ok]
    out[ok] = p.a1 * fro2[ok] ** 2 + p.a2 * (d - 1.0 / d) ** 4
    return out


def ogden_energy(F, p):
    """Sum of :func:`ogden_density` over the grid (``inf`` on any fold)."""
    return float(np.sum(ogden_density(F, p)))


def ogden_gradient(z, p):
    """Derivative of ``W(I + z)`` with respect to ``z`` (``det(I+z) > 0`` assumed)."""
    z11, z12, z21, z22 = z[0, 0], z[0, 1], z[1, 0], z[1, 1]
    F11, F22 = 1.0 + z11, 1.0 + z22
    det = F11 * F22 - z12 * z21
    fro2 = F11 ** 2 + z12 ** 2 + z21 ** 2 + F22 ** 2
    c0 = (det - 1.0 / det) ** 3
    c1 = 1.0 + 1.0 / det ** 2
    a = 4.0 * p.a1 * fro2
    b = 4.0 * p.a2 * c0 * c1
    g = np.empty_like(z)
    g[0, 0] = a * F11 + b * F22
    g[0, 1] = a * z12 - b * z21
    g[1, 0] = a * z21 - b * z12
    g[1, 1] = a * F22 + b * F11
    return g


def z_energy_density(z, grad_v, p, gamma1):
    """Per-pixel ``W(I + z) + gamma1/2 |z - grad v|^2``."""
    F = z.copy()
    F[0, 0] += 1.0
    F[1, 1] += 1.0
    return ogden_density(F, p) + 0.5 * gamma1 * np.sum((z - grad_v) ** 2, axis=(0, 1))


def displacement_gradient(v):
    """``grad v`` as a matrix field, forward differences."""
    v = np.asarray(getattr(v, "displacement", v), dtype=float)
    return np.stack([grid.gradient(v[0]), grid.gradient(v[1])])


def update_z(z, v, p, gamma1, dt):
    """One semi-implicit gradient-flow step for the displacement-gradient proxy.

    ``z_new = (z + dt * (-dW/dz(I + z) + gamma1 * grad v)) / (1 + dt * gamma1)``

    Raises
    ------
    FloatingPointError
        if ``det(I + z) <= 0`` anywhere, where the update is undefined.
    """
    z = np.asarray(z, dtype=float)
    det = (1.0 + z[0, 0]) * (1.0 + z[1, 1]) - z[0, 1] * z[1, 0]
    if np.any(det <= 0):
        raise FloatingPointError("det(I + z) <= 0: shrink dt or regrid")
    gv = v if np.ndim(v) == 4 else displacement_gradient(v)
    return (z + dt * (-ogden_gradient(z, p) + gamma1 * gv)) / (1.0 + dt * gamma1)


def z_step(z, grad_v, p, gamma1, dt, dt_min=1e-6):
    """Monotone version of :func:`update_z` used by the drivers.

    Each pixel halves its own step until the pixel energy does not increase
    (and ``det(I + z) > 0``). Pixels that fail down to ``dt_min`` keep their
    old value. Returns the new field and the number of pixels that needed a
    smaller step.
    """
    e_old = z_energy_density(z, grad_v, p, gamma1)
    new = z.copy()
    todo = np.ones(e_old.shape, dtype=bool)
    step = dt
    n_shrunk = 0
    first = True
    while todo.any() and step >= dt_min:
        zs = z[..., todo]
        gs = grad_v[..., todo]
        det = (1.0 + zs[0, 0]) * (1.0 + zs[1, 1]) - zs[0, 1] * zs[1, 0]
        cand = (zs + step * (-ogden_gradient(zs, p) + gamma1 * gs)) / (1.0 + step * gamma1)
        F = cand.copy()
        F[0, 0] += 1.0
        F[1, 1] += 1.0
        e_new = ogden_density(F, p) + 0.5 * gamma1 * np.sum((cand - gs) ** 2, axis=0).sum(axis=0)
        ok = (e_new <= e_old[todo]) & np.isfinite(e_new) & (det > 0)
        idx = np.flatnonzero(todo.ravel())
        good = idx[ok]
        new.reshape(2, 2, -1)[..., good] = cand[..., ok]
        flat = todo.ravel()
        flat[good] = False
        todo = flat.reshape(todo.shape)
        if not first:
            n_shrunk += int(ok.sum())
        first = False
        step *= 0.5
    return new, n_shrunk


# ---------------------------------------------------------------------------
# phi update


def _dirichlet_eigs(n):
    k = np.arange(1, n - 1)
    return 4.0 * np.sin(np.pi * k / (2.0 * (n - 1))) ** 2


def screened_poisson_solve(rhs, c):
    """Solve ``(I - c * Laplacian) w = rhs`` on the interior, ``w = 0`` on the boundary ring.

    The 5-point Laplacian with zero boundary values is diagonalised by the
    type-I sine transform.
    """
    rhs = np.asarray(rhs, dtype=float)
    ny, nx = rhs.shape
    out = np.zeros_like(rhs)
    if ny < 3 or nx < 3:
        return out
    lam = _dirichlet_eigs(ny)[:, None] + _dirichlet_eigs(nx)[None, :]
    coef = sfft.dstn(rhs[1:-1, 1:-1], type=1)
    out[1:-1, 1:-1] = sfft.idstn(coef / (1.0 + c * lam), type=1)
    return out


def pin_boundary(v):
    """Zero the displacement on the outermost pixel ring (in place) and return it."""
    v[:, 0, :] = 0.0
    v[:, -1, :] = 0.0
    v[:, :, 0] = 0.0
    v[:, :, -1] = 0.0
    return v


def image_gradient(h):
    """Central-difference gradient used for the registration force."""
    gy, gx = np.gradient(np.asarray(h, dtype=float))
    return np.stack([gy, gx])


def matching_force(v, h, target, grad_h=None):
    """``(h o phi - target) * grad h(phi)``, the derivative of ``1/2 |h o phi - target|^2``."""
    if grad_h is None:
        grad_h = image_gradient(h)
    coords = grid.identity_coords(h.shape) + v
    resid = grid.sample(h, coords) - target
    return np.stack([resid * grid.sample(grad_h[0], coords), resid * grid.sample(grad_h[1], coords)])


def update_phi(phi, z, h, Cu, gamma1, gamma2, dt, grad_h=None):
    """One semi-implicit step of the L2 gradient flow in ``phi``.

    ``(I - dt*gamma1*Lap) v_new = v - dt*(gamma1*div z + gamma2*(h o phi - Cu)*grad h(phi))``

    with ``div z`` taken row-wise. Boundary displacements stay zero.
    """
    v = np.asarray(getattr(phi, "displacement", phi), dtype=float)
    z = np.asarray(z, dtype=float)
    force = gamma2 * matching_force(v, h, Cu, grad_h)
    rhs = v - dt * (gamma1 * np.stack([grid.divergence(z[0]), grid.divergence(z[1])]) + force)
    c = dt * gamma1
    new = np.stack([screened_poisson_solve(rhs[0], c), screened_poisson_solve(rhs[1], c)])
    return Deformation(new)


# ---------------------------------------------------------------------------
# inversion / composition


def invert_deformation(phi, max_iter=50, tol_px=1e-3, return_residual=False):
    """Numerical inverse by the fixed point ``w <- -v(x + w)`` from ``w = 0``.

    The fixed point only contracts where ``|grad v| < 1``; if it stalls, a
    damped per-pixel Newton solve of ``w + v(x + w) = 0`` takes over. A
    warning is issued if neither reaches ``tol_px`` within ``max_iter``
    iterations; the last iterate is returned regardless.
    """
    v = phi.displacement
    shape = phi.shape
    base = grid.identity_coords(shape)
    w = np.zeros_like(v)
    change = 0.0
    if v.any():
        change = np.inf
        for _ in range(max_iter):
            c = base + w
            w_new = -np.stack([grid.sample(v[0], c), grid.sample(v[1], c)])
            change = float(np.max(np.abs(w_new - w)))
            w = w_new
            if change < tol_px:
                break
        else:
            w, change = _newton_inverse(v, base, max_iter, tol_px)
            if change >= tol_px:
                warnings.warn(f"deformation inverse did not converge (last update {change:.3g} px)",
                              RuntimeWarning, stacklevel=2)
    inv = Deformation(w)
    if return_residual:
        return inv, change
    return inv


def _newton_inverse(v, base, max_iter, tol_px):
    """Damped Newton on ``w + v(x + w) = 0``; each pixel's residual depends on its own ``w`` only."""

    def residual(w):
        c = base + w
        return w + np.stack([grid.sample(v[0], c), grid.sample(v[1], c)])

    dv = [np.gradient(v[0]), np.gradient(v[1])]  # dv[i][j] = d v_i / d x_j
    w = np.zeros_like(v)
    r = residual(w)
    rn = np.sqrt(r[0] ** 2 + r[1] ** 2)
    for _ in range(max_iter):
        if rn.max() < tol_px:
            break
        c = base + w
        j00, j01 = 1.0 + grid.sample(dv[0][0], c), grid.sample(dv[0][1], c)
        j10, j11 = grid.sample(dv[1][0], c), 1.0 + grid.sample(dv[1][1], c)
        det = j00 * j11 - j01 * j10
        ok = det > 1e-6
        safe = np.where(ok, det, 1.0)
        step = np.where(ok, np.stack([(j11 * r[0] - j01 * r[1]) / safe, (j00 * r[1] - j10 * r[0]) / safe]), r)
        t = np.ones(rn.shape)
        todo = rn >= tol_px
        for _ in range(30):
            cand = w - t * step
            rc = residual(cand)
            rcn = np.sqrt(rc[0] ** 2 + rc[1] ** 2)
            take = todo & (rcn < rn)
            w = np.where(take, cand, w)
            r = np.where(take, rc, r)
            rn = np.where(take, rcn, rn)
            todo &= ~take
            if not todo.any():
                break
            t = np.where(todo, 0.5 * t, t)
    return w, float(rn.max())


def compose_deformations(a, b):
    """``a o b``: displacement ``v_b + v_a(x + v_b)``."""
    vb = b.displacement
    if not vb.any():
        return a.copy()
    c = grid.identity_coords(b.shape) + vb
    return Deformation(vb + np.stack([grid.sample(a.displacement[0], c), grid.sample(a.displacement[1], c)]))


def det_inverse_jacobian(phi, phi_inv):
    """``det grad(phi^-1)`` evaluated as ``1 / (det grad(phi) o phi^-1)``."""
    det = phi.det()
    if np.any(det <= 0):
        raise FloatingPointError("deformation folds (det <= 0); cannot form inverse Jacobian")
    return 1.0 / grid.warp(det, phi_inv)


# ---------------------------------------------------------------------------
# regridding


@dataclass
class RegridState:
    tol: float = 0.05
    regrid_count: int = 0
    saved_maps: list = field(default_factory=list)

    def composed(self, current=None):
        """``saved[0] o saved[1] o ... o current``; identity when nothing is saved."""
        maps = list(self.saved_maps)
        if current is not None:
            maps.append(current)
        if not maps:
            return None
        out = maps[-1]
        for m in reversed(maps[:-1]):
            out = compose_deformations(m, out)
        return out


def regrid_step(state, phi, z, h, previous=None):
    """Restart from the identity once ``det grad(phi)`` drops below ``state.tol``.

    When triggered, ``h`` is warped by the saved map, which is ``previous``
    if given and ``phi`` otherwise (``phi`` must not fold). ``phi`` and ``z``
    are then reset. Returns ``(phi, z, h, state)``.
    """
    if float(phi.det().min()) >= state.tol:
        return phi, z, h, state
    saved = phi if previous is None else previous
    if float(saved.det().min()) <= 0:
        raise FloatingPointError("cannot regrid onto a folded deformation")
    state.regrid_count += 1
    h = grid.warp(h, saved)
    state.saved_maps.append(saved.copy())
    log.debug("regrid #%d (min det %.3g)", state.regrid_count, float(phi.det().min()))
    return Deformation.identity(phi.shape), np.zeros_like(z), h, state


# ---------------------------------------------------------------------------
# pairwise registration and multiscale driver


def registration_energy(v, z, template, moving, p, gamma1, gamma2):
    """``sum W(I+z) + gamma1/2 |z - grad v|^2 + gamma2/2 |moving o phi - template|^2``."""
    gv = displacement_gradient(v)
    e = float(np.sum(z_energy_density(z, gv, p, gamma1)))
    r = grid.warp(moving, v) - template
    return e + 0.5 * gamma2 * float(np.sum(r * r))


def register(template, moving, p=OgdenParams(), gamma1=5.0, gamma2=1.0, iters=200, dt=1e-3,
             phi_dt=1.0, regrid_tol=0.05, init=None):
    """Hyperelastic registration of ``moving`` onto ``template``.

    Finds ``phi`` with ``moving o phi ~ template`` by alternating the z and
    phi gradient-flow steps. The phi step length is adapted so that the
    registration energy never increases. Regridding restarts the flow from
    the identity when the Jacobian determinant drops below ``regrid_tol``.

    Returns
    -------
    phi : Deformation
        Total map, i.e. all saved regridding maps composed with the current one.
    info : dict
        ``energy`` trace, ``regrid_count`` and ``min_det``.
    """
    template = np.asarray(template, dtype=float)
    moving0 = np.asarray(moving, dtype=float)
    shape = template.shape
    state = RegridState(tol=regrid_tol)
    phi = init.copy() if init is not None else Deformation.identity(shape)
    pin_boundary(phi.displacement)
    z = displacement_gradient(phi.displacement)
    moving = moving0
    grad_m = image_gradient(moving)
    step = phi_dt
    trace = []
    energy = registration_energy(phi.displacement, z, template, moving, p, gamma1, gamma2)
    for _ in range(iters):
        z, _ = z_step(z, displacement_gradient(phi.displacement), p, gamma1, dt)
        energy = registration_energy(phi.displacement, z, template, moving, p, gamma1, gamma2)
        for _ in range(30):
            cand = update_phi(phi, z, moving, template, gamma1, gamma2, step, grad_m)
            if cand.det().min() > 0:
                e_new = registration_energy(cand.displacement, z, template, moving, p, gamma1, gamma2)
                if e_new <= energy:
                    break
            step *= 0.5
        else:
            cand, e_new = phi, energy
        phi, energy = cand, e_new
        step = min(step * 1.5, phi_dt)
        n_before = state.regrid_count
        phi, z, moving, state = regrid_step(state, phi, z, moving)
        if state.regrid_count != n_before:
            grad_m = image_gradient(moving)
            energy = registration_energy(phi.displacement, z, template, moving, p, gamma1, gamma2)
        trace.append(energy)
    total = state.composed(phi)
    return total, {"energy": trace, "regrid_count": state.regrid_count, "min_det": float(total.det().min())}


def pyramid_levels(shape, levels, min_size=8):
    """Number of usable levels: stop before any dimension falls below ``min_size``."""
    usable = 1
    ny, nx = shape
    while usable < levels and min(-(-ny // 2), -(-nx // 2)) >= min_size:
        ny, nx = -(-ny // 2), -(-nx // 2)
        usable += 1
    if usable < levels:
        warnings.warn(f"grid {shape} too small for {levels} levels; using {usable}", RuntimeWarning, stacklevel=2)
    return usable


def multiscale_register(driver, images, levels=2, min_size=8):
    """Coarse-to-fine wrapper around a single-level registration ``driver``.

    Parameters
    ----------
    driver : callable
        ``driver(images, init) -> Deformation`` runs one level. ``images`` is
        the tuple of input fields restricted to that level and ``init`` the
        prolonged deformation from the level below (``None`` at the coarsest).
    images : sequence of 2-D arrays
        Inputs sharing one grid.
    levels : int
        Pyramid depth ``k``; ``1`` is a plain single-level solve.
    """
    images = [np.asarray(im, dtype=float) for im in images]
    levels = pyramid_levels(images[0].shape, levels, min_size)
    pyramid = [images]
    for _ in range(levels - 1):
        pyramid.append([grid.restrict(im) for im in pyramid[-1]])
    phi = None
    for lvl in range(levels - 1, -1, -1):
        ims = pyramid[lvl]
        init = None
        if phi is not None:
            init = Deformation(pin_boundary(grid.prolong_displacement(phi.displacement, ims[0].shape)))
        phi = driver(tuple(ims), init)
    return phi

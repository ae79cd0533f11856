"""Alternating minimisation of the decoupled joint reconstruction/registration/SR energy.

Per frame ``t`` the unknowns are the deformation ``phi_t`` (frame grid), its
gradient proxy ``z_t``, the frame image ``h_t`` and its edge-weighted TV
denoised copy ``f_t``; the shared unknown is the high-resolution image
``u``. Every sub-step of a sweep is safeguarded so that the total energy
never increases, apart from regridding restarts.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import grid
from .operators import SystemOperator
from .registration import (
    Deformation,
    OgdenParams,
    RegridState,
    compose_deformations,
    det_inverse_jacobian,
    displacement_gradient,
    image_gradient,
    invert_deformation,
    matching_force,
    ogden_density,
    pin_boundary,
    pyramid_levels,
    regrid_step,
    register,
    screened_poisson_solve,
    z_step,
)
from .tvsolvers import (
    canny_weights,
    chambolle_prox,
    conjugate_gradient,
    primal_dual_tv,
    tv,
    weighted_tv,
)

log = logging.getLogger(__name__)


@dataclass
class SolverParams:
    """All scalars of the model and its numerics.

    The first block holds the model weights (defaults: the first
    published parameter column); the rest are numerical choices.
    """

    a1: float = 1.0
    a2: float = 50.0
    gamma1: float = 5.0
    gamma2: float = 1e5
    gamma3: float = 15.0
    theta: float = 5.0
    sigma: float = 1.5
    levels_k: int = 2
    iters_Nn: int = 500
    alpha: float = 0.01

    dt: float = 1e-3
    phi_dt: float = 1.0
    regrid_tol: float = 0.05
    delta_weight: float = 1.0
    chambolle_step: float = 0.125
    pd_tau: float = 1.0 / np.sqrt(8.0)
    pd_sigma: float = 1.0 / np.sqrt(8.0)
    cg_tol: float = 1e-8
    cg_max: int = 200
    inv_max_iter: int = 50
    inv_tol_px: float = 1e-3
    outer_iters: int = 200
    canny_low: float = 0.1
    canny_high: float = 0.2
    floor_c: float = 0.01
    blur_sigma: float = 1.0
    stop_tol: float = 1e-7

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "blur_sigma":
                if not np.isfinite(val) or val < 0:
                    raise ValueError(f"blur_sigma must be non-negative, got {val}")
            elif not np.isfinite(val) or val <= 0:
                raise ValueError(f"{f.name} must be strictly positive, got {val}")
        if self.pd_tau * self.pd_sigma * 8.0 > 1.0 + 1e-12:
            raise ValueError("pd_tau * pd_sigma * 8 must not exceed 1")
        if self.chambolle_step > 0.125 + 1e-15:
            raise ValueError("chambolle_step must not exceed 1/8")
        if not self.canny_low < self.canny_high:
            raise ValueError("canny_low must be below canny_high")
        if not self.floor_c < 1:
            raise ValueError("floor_c must be below 1")
        for name in ("levels_k", "iters_Nn", "cg_max", "inv_max_iter", "outer_iters"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        return self

    @property
    def ogden(self):
        return OgdenParams(self.a1, self.a2)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SolverParams(**d)


# ---------------------------------------------------------------------------
# problem / state containers


def _shift_half(x):
    """Multiply k-space by the phase ramp of a half-pixel shift along both axes."""
    ny, nx = x.shape[-2:]
    ky = np.fft.fftfreq(ny)[:, None]
    kx = np.fft.fftfreq(nx)[None, :]
    return x * np.exp(1j * np.pi * (ky + kx))


def _crop_index(n, c):
    """Storage indices (DC first) of the ``c`` lowest frequencies of an ``n``-point FFT."""
    pos = {int(k): i for i, k in enumerate(np.fft.ifftshift(np.arange(n) - n // 2))}
    return np.array([pos[int(k)] for k in np.fft.ifftshift(np.arange(c) - c // 2)])


def restrict_kspace(x, mask):
    """Crop the central half of k-space: the frame on a grid twice as coarse.

    A half-pixel phase ramp aligns the coarse samples with 2x2 block centres
    (the convention of :func:`grid.restrict`); unitary scaling is kept.
    """
    ny, nx = x.shape
    cy, cx = -(-ny // 2), -(-nx // 2)
    ri = _crop_index(ny, cy)
    ci = _crop_index(nx, cx)
    xs = _shift_half(x)
    scale = np.sqrt((cy * cx) / (ny * nx))
    return scale * xs[np.ix_(ri, ci)], mask[np.ix_(ri, ci)]


@dataclass
class Problem:
    """Data of one pyramid level."""

    kspace: np.ndarray
    masks: np.ndarray
    op: SystemOperator

    @property
    def T(self):
        return len(self.kspace)

    @property
    def lr_shape(self):
        return self.kspace.shape[1:]

    def zero_filled(self):
        return np.stack([grid.ifft2(np.where(m, x, 0)).real for x, m in zip(self.kspace, self.masks)])

    def coarsened(self):
        ks, ms = zip(*(restrict_kspace(x, m) for x, m in zip(self.kspace, self.masks)))
        return Problem(np.stack(ks), np.stack(ms), self.op.coarsened())

    @classmethod
    def from_dataset(cls, ds, blur_sigma):
        return cls(ds.kspace, ds.masks, SystemOperator(ds.hr_shape, ds.factor, blur_sigma))


@dataclass
class FrameState:
    phi: Deformation  # current map since the last regrid
    phi_inv: Deformation  # inverse of the total map
    z: np.ndarray
    h: np.ndarray
    f: np.ndarray
    g: np.ndarray
    p: np.ndarray  # Chambolle dual
    regrid: RegridState
    det_inv: np.ndarray
    phi_dt: float = 1.0

    @property
    def total(self):
        """Saved regridding maps composed with the current one."""
        return self.regrid.composed(self.phi)


@dataclass
class JointState:
    u: np.ndarray
    frames: list
    y: np.ndarray | None = None  # primal-dual dual of the u problem
    energy_trace: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)
    regrid_flags: list = field(default_factory=list)
    level_starts: list = field(default_factory=list)


@dataclass
class EnergyBreakdown:
    ogden: float
    z_penalty: float
    data: float
    tv_u: float
    coupling: float
    f_penalty: float
    wtv_f: float

    TERMS = ("ogden", "z_penalty", "data", "tv_u", "coupling", "f_penalty", "wtv_f")

    @property
    def total(self):
        return self.ogden + self.z_penalty + self.data + self.tv_u + self.coupling + self.f_penalty + self.wtv_f

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.TERMS}
        d["total"] = self.total
        return d


# ---------------------------------------------------------------------------
# per-frame energy pieces


def _z_terms(fr, params):
    F = fr.z.copy()
    F[0, 0] += 1.0
    F[1, 1] += 1.0
    og = float(np.sum(ogden_density(F, params.ogden)))
    pen = 0.5 * params.gamma1 * float(np.sum((fr.z - displacement_gradient(fr.phi.displacement)) ** 2))
    return og, pen


def _coupling(h, Cu, phi_inv, det_inv, gamma2):
    r = h - grid.warp(Cu, phi_inv)
    return 0.5 * gamma2 * float(np.sum(r * r * det_inv))


def _data_term(h, x, mask, gamma3):
    r = np.where(mask, grid.fft2(h), 0) - x
    return 0.5 * gamma3 * float(np.sum(np.abs(r) ** 2))


def objective_value(state, problem, params):
    """Every term of the decoupled energy, frame terms averaged over ``T``."""
    T = len(state.frames)
    Cu = problem.op.apply(state.u)
    parts = dict.fromkeys(("ogden", "z_penalty", "data", "coupling", "f_penalty", "wtv_f"), 0.0)
    for t, fr in enumerate(state.frames):
        og, pen = _z_terms(fr, params)
        parts["ogden"] += og / T
        parts["z_penalty"] += pen / T
        parts["data"] += _data_term(fr.h, problem.kspace[t], problem.masks[t], params.gamma3) / T
        parts["coupling"] += _coupling(fr.h, Cu, fr.phi_inv, fr.det_inv, params.gamma2) / T
        parts["f_penalty"] += float(np.sum((fr.f - fr.h) ** 2)) / (2.0 * params.theta) / T
        parts["wtv_f"] += params.delta_weight * weighted_tv(fr.f, fr.g) / T
    return EnergyBreakdown(tv_u=params.alpha * tv(state.u), **parts)


# ---------------------------------------------------------------------------
# sub-problems


def _invert_total(fr, params, init=None):
    total = fr.total
    inv = _invert(total, params, init)
    return total, inv, det_inverse_jacobian(total, inv)


def _invert(phi, params, init=None):
    """Fixed-point inverse, optionally warm-started."""
    if init is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return invert_deformation(phi, params.inv_max_iter, params.inv_tol_px)
    v = phi.displacement
    base = grid.identity_coords(phi.shape)
    w = init.displacement.copy()
    for _ in range(params.inv_max_iter):
        c = base + w
        w_new = -np.stack([grid.sample(v[0], c), grid.sample(v[1], c)])
        change = float(np.max(np.abs(w_new - w)))
        w = w_new
        if change < params.inv_tol_px:
            break
    return Deformation(w)


def _sym_mask(mask):
    """Hermitian-symmetrised sampling mask; the Fourier normal operator on real images."""
    m = np.asarray(mask, dtype=float)
    return 0.5 * (m + np.roll(m[::-1, ::-1], 1, axis=(0, 1)))


def _normal_F(h, mask_sym):
    return grid.ifft2(mask_sym * grid.fft2(h)).real


def update_h(state, t, problem, params, mode="cg", Cu=None):
    """Minimise the quadratic h-subproblem of frame ``t``.

    ``mode="cg"`` solves the normal equations with the spatially varying
    inverse-Jacobian weight by preconditioned CG (warm-started at the
    current ``h``); ``mode="diagonal"`` replaces the weight by its mean so
    the system is diagonal in k-space. For real images the sampling
    projection enters through its Hermitian-symmetrised mask.
    """
    fr = state.frames[t]
    if Cu is None:
        Cu = problem.op.apply(state.u)
    g2, g3, it = params.gamma2, params.gamma3, 1.0 / params.theta
    mask = problem.masks[t]
    msym = _sym_mask(mask)
    target = grid.warp(Cu, fr.phi_inv)
    d = fr.det_inv
    Fx = grid.ifft2(np.where(mask, problem.kspace[t], 0)).real
    rhs = g2 * d * target + g3 * Fx + it * fr.f

    dbar = float(d.mean())

    def diag_solve(r):
        return grid.ifft2(grid.fft2(r) / (g2 * dbar + g3 * msym + it)).real

    if mode == "diagonal":
        return diag_solve(rhs)
    if mode != "cg":
        raise ValueError(f"unknown h mode {mode!r}")

    def A(h):
        return g2 * d * h + g3 * _normal_F(h, msym) + it * h

    try:
        h, res = conjugate_gradient(A, rhs, x0=fr.h, tol=params.cg_tol, maxiter=params.cg_max, precond=diag_solve)
    except (ArithmeticError, ValueError) as exc:
        warnings.warn(f"CG failed in h update ({exc}); using the diagonal solve", RuntimeWarning, stacklevel=2)
        return diag_solve(rhs)
    if not np.all(np.isfinite(h)):
        warnings.warn("CG diverged in h update; using the diagonal solve", RuntimeWarning, stacklevel=2)
        return diag_solve(rhs)
    return h


def h_system_residual(state, t, problem, params, h):
    """Relative residual of ``h`` in the cg-mode normal equations."""
    fr = state.frames[t]
    Cu = problem.op.apply(state.u)
    mask = problem.masks[t]
    msym = _sym_mask(mask)
    d = fr.det_inv
    rhs = (params.gamma2 * d * grid.warp(Cu, fr.phi_inv)
           + params.gamma3 * grid.ifft2(np.where(mask, problem.kspace[t], 0)).real + fr.f / params.theta)
    Ah = params.gamma2 * d * h + params.gamma3 * _normal_F(h, msym) + h / params.theta
    return float(np.linalg.norm(Ah - rhs) / np.linalg.norm(rhs))


def _frame_phi_energy(fr, phi, inv, det_inv, Cu, params):
    pen = 0.5 * params.gamma1 * float(np.sum((fr.z - displacement_gradient(phi.displacement)) ** 2))
    return pen + _coupling(fr.h, Cu, inv, det_inv, params.gamma2)


def _phi_step(fr, Cu, params):
    """Semi-implicit phi step with step-length backtracking on the frame energy."""
    saved = fr.regrid.composed()
    moving = fr.h if saved is None else grid.warp(fr.h, saved)
    grad_m = image_gradient(moving)
    v = fr.phi.displacement
    force = params.gamma2 * matching_force(v, moving, Cu, grad_m)
    divz = np.stack([grid.divergence(fr.z[0]), grid.divergence(fr.z[1])])
    e_old = _frame_phi_energy(fr, fr.phi, fr.phi_inv, fr.det_inv, Cu, params)
    step = fr.phi_dt
    for _ in range(25):
        rhs = v - step * (params.gamma1 * divz + force)
        c = step * params.gamma1
        cand = Deformation(np.stack([screened_poisson_solve(rhs[0], c), screened_poisson_solve(rhs[1], c)]))
        if cand.det().min() > 0:
            total = cand if saved is None else compose_deformations(saved, cand)
            if total.det().min() > 0:
                inv = _invert(total, params, fr.phi_inv)
                dinv = det_inverse_jacobian(total, inv)
                e_new = _frame_phi_energy(fr, cand, inv, dinv, Cu, params)
                if e_new <= e_old:
                    fr.phi_dt = min(2.0 * step, params.phi_dt)
                    return cand, inv, dinv
        step *= 0.5
    fr.phi_dt = max(step, 1e-12)
    return fr.phi, fr.phi_inv, fr.det_inv


def _f_step(fr, params):
    g = params.delta_weight * fr.g
    f, p = chambolle_prox(fr.h, params.theta, g, params.iters_Nn, params.chambolle_step, p0=fr.p, return_dual=True)
    old = float(np.sum((fr.f - fr.h) ** 2)) / (2 * params.theta) + weighted_tv(fr.f, g)
    new = float(np.sum((f - fr.h) ** 2)) / (2 * params.theta) + weighted_tv(f, g)
    if new <= old:
        fr.f, fr.p = f, p


def _u_terms(u, state, problem, params):
    Cu = problem.op.apply(u)
    T = len(state.frames)
    c = sum(_coupling(fr.h, Cu, fr.phi_inv, fr.det_inv, params.gamma2) for fr in state.frames) / T
    return c + params.alpha * tv(u)


def _u_step(state, problem, params):
    op = problem.op
    T = len(state.frames)
    b = sum(grid.warp(fr.h, fr.total) for fr in state.frames) / T
    u_new, info = primal_dual_tv(
        params.gamma2, b, params.alpha, op.apply, op.adjoint, params.iters_Nn,
        params.pd_tau, params.pd_sigma, u0=state.u, y0=state.y, solve_normal=op.solve_normal,
        return_info=True,
    )
    e_old = _u_terms(state.u, state, problem, params)
    s = 1.0
    for _ in range(12):
        cand = state.u + s * (u_new - state.u)
        if _u_terms(cand, state, problem, params) <= e_old:
            state.u = cand
            state.y = info["dual"]
            return
        s *= 0.5


def init_state(problem, params, u=None, deformations=None):
    """Zero-filled frames, identity maps (unless given), Canny weights, initial ``u``."""
    if problem.T == 0:
        raise ValueError("empty dataset")
    zf = problem.zero_filled()
    shape = problem.lr_shape
    frames = []
    for t in range(problem.T):
        phi = Deformation.identity(shape) if deformations is None else deformations[t].copy()
        pin_boundary(phi.displacement)
        inv = _invert(phi, params)
        g = canny_weights(zf[t], params.sigma, params.canny_low, params.canny_high, params.floor_c)
        frames.append(FrameState(
            phi=phi, phi_inv=inv, z=displacement_gradient(phi.displacement), h=zf[t].copy(), f=zf[t].copy(),
            g=g, p=np.zeros((2,) + shape), regrid=RegridState(tol=params.regrid_tol),
            det_inv=det_inverse_jacobian(phi, inv), phi_dt=params.phi_dt,
        ))
    if u is None:
        mean_h = zf.mean(axis=0)
        u = problem.op.adjoint(mean_h)
        Cu = problem.op.apply(u)
        nc = np.linalg.norm(Cu)
        if nc > 0:
            u *= np.linalg.norm(mean_h) / nc
    return JointState(u=np.asarray(u, dtype=float), frames=frames)


def outer_iterate(state, problem, params, h_mode="cg"):
    """One sweep: per frame regrid, z, phi, inverse, h, f; then u. Appends the energy."""
    Cu = problem.op.apply(state.u)
    regridded = False
    for t, fr in enumerate(state.frames):
        n_before = fr.regrid.regrid_count
        fr.phi, fr.z, _, fr.regrid = regrid_step(fr.regrid, fr.phi, fr.z, fr.h)
        if fr.regrid.regrid_count != n_before:
            regridded = True
            fr.phi_dt = params.phi_dt
        gv = displacement_gradient(fr.phi.displacement)
        fr.z, _ = z_step(fr.z, gv, params.ogden, params.gamma1, params.dt)
        fr.phi, fr.phi_inv, fr.det_inv = _phi_step(fr, Cu, params)
        fr.h = update_h(state, t, problem, params, h_mode, Cu)
        _f_step(fr, params)
    _u_step(state, problem, params)
    e = objective_value(state, problem, params)
    if not np.isfinite(e.total):
        raise FloatingPointError(f"energy became {e.total} after sweep {len(state.energy_trace)}")
    state.energy_trace.append(e.total)
    state.breakdowns.append(e)
    state.regrid_flags.append(regridded)
    return state


def _prolong_state(state, problem, params, coarse_problem):
    u = grid.prolong(state.u, problem.op.hr_shape)
    defs = [Deformation(grid.prolong_displacement(fr.total.displacement, problem.lr_shape)) for fr in state.frames]
    new = init_state(problem, params, u=u, deformations=defs)
    Cu = problem.op.apply(new.u)
    for t, fr in enumerate(new.frames):
        fr.h = update_h(new, t, problem, params, "cg", Cu)
        fr.f = fr.h.copy()
    new.energy_trace = list(state.energy_trace)
    new.breakdowns = list(state.breakdowns)
    new.regrid_flags = list(state.regrid_flags)
    new.level_starts = list(state.level_starts)
    return new


def _run_level(state, problem, params, h_mode, callback=None):
    state.level_starts.append(len(state.energy_trace))
    start = len(state.energy_trace)
    for k in range(int(params.outer_iters)):
        outer_iterate(state, problem, params, h_mode)
        if callback is not None:
            callback(state, problem)
        tr = state.energy_trace
        if len(tr) - start > 5 and not any(state.regrid_flags[-5:]):
            old, new = tr[-6], tr[-1]
            if old - new <= params.stop_tol * abs(old):
                break
    return state


def solve_joint(dataset, params=None, h_mode="cg", callback=None):
    """Joint reconstruction, registration and super-resolution.

    Returns
    -------
    u : ndarray
        High-resolution image.
    deformations : list of Deformation
        Total maps ``phi_t`` on the frame grid.
    diagnostics : dict
        Energy trace and breakdowns, regrid counts, minimum determinants,
        final frame images and wall time.
    """
    params = params or SolverParams()
    t0 = time.perf_counter()
    fine = Problem.from_dataset(dataset, params.blur_sigma)
    levels = pyramid_levels(fine.lr_shape, int(params.levels_k))
    problems = [fine]
    for _ in range(levels - 1):
        problems.append(problems[-1].coarsened())
    state = None
    for lvl in range(levels - 1, -1, -1):
        prob = problems[lvl]
        if state is None:
            state = init_state(prob, params)
        else:
            state = _prolong_state(state, prob, params, problems[lvl + 1])
        state = _run_level(state, prob, params, h_mode, callback)
    return _finish(state, fine, params, t0)


def _finish(state, problem, params, t0):
    deformations = [fr.total for fr in state.frames]
    diag = {
        "energy": list(state.energy_trace),
        "breakdowns": [b.as_dict() for b in state.breakdowns],
        "regrid_flags": list(state.regrid_flags),
        "level_starts": list(state.level_starts),
        "regrid_counts": [fr.regrid.regrid_count for fr in state.frames],
        "min_det": [float(d.det().min()) for d in deformations],
        "frames": np.stack([fr.h for fr in state.frames]),
        "state": state,
        "wall_time": time.perf_counter() - t0,
    }
    return state.u, deformations, diag


# ---------------------------------------------------------------------------
# sequential baseline


def cs_tv_reconstruct(x, mask, gamma3, weight, iters=500, tau=None, sigma=None, tol=1e-7):
    """Single-frame ``min gamma3/2 |F h - x|^2 + weight TV(h)`` by primal-dual.

    The primal step is diagonal in k-space.
    """
    tau = tau or 1.0 / np.sqrt(8.0)
    sigma = sigma or 1.0 / np.sqrt(8.0)
    Fx = grid.ifft2(np.where(mask, x, 0)).real
    u = Fx.copy()
    y = np.zeros((2,) + u.shape)
    ub = u.copy()
    den = 1.0 + tau * gamma3 * _sym_mask(mask)
    for _ in range(iters):
        y = y + sigma * grid.gradient(ub)
        if weight > 0:
            y /= np.maximum(1.0, np.sqrt(y[0] ** 2 + y[1] ** 2) / weight)
        else:
            y[:] = 0
        u_old = u
        u = grid.ifft2(grid.fft2(u + tau * grid.divergence(y) + tau * gamma3 * Fx) / den).real
        ub = 2 * u - u_old
        if np.linalg.norm(u - u_old) <= tol * max(np.linalg.norm(u), 1e-30):
            break
    return u


def solve_sequential(dataset, params=None, reference=0, cs_weight=None):
    """Reconstruct each frame, register all to a reference frame, then super-resolve.

    Stage 1 is CS-TV per frame (data weight ``gamma3``, TV weight
    ``delta_weight`` unless ``cs_weight`` is given), stage 2 the hyperelastic
    registration of each frame to frame ``reference``, stage 3 TV
    super-resolution from the registered frames.
    """
    params = params or SolverParams()
    t0 = time.perf_counter()
    problem = Problem.from_dataset(dataset, params.blur_sigma)
    weight = params.delta_weight if cs_weight is None else cs_weight
    recon = np.stack([
        cs_tv_reconstruct(x, m, params.gamma3, weight, int(params.iters_Nn), params.pd_tau, params.pd_sigma)
        for x, m in zip(problem.kspace, problem.masks)
    ])
    ref = recon[reference]
    deformations = []
    infos = []
    from .registration import multiscale_register

    for t in range(problem.T):
        if t == reference:
            deformations.append(Deformation.identity(problem.lr_shape))
            infos.append({"regrid_count": 0, "energy": []})
            continue

        def driver(ims, init, _info=infos):
            phi, info = register(ims[0], ims[1], params.ogden, params.gamma1, params.gamma2,
                                 int(params.outer_iters), params.dt, params.phi_dt, params.regrid_tol, init)
            driver.info = info
            return phi

        phi = multiscale_register(driver, (ref, recon[t]), int(params.levels_k))
        deformations.append(phi)
        infos.append(driver.info)
    registered = np.stack([grid.warp(recon[t], deformations[t]) for t in range(problem.T)])
    b = registered.mean(axis=0)
    op = problem.op
    u = primal_dual_tv(params.gamma2, b, params.alpha, op.apply, op.adjoint, int(params.iters_Nn),
                       params.pd_tau, params.pd_sigma, solve_normal=op.solve_normal)
    diag = {
        "stage1": recon,
        "stage2": registered,
        "regrid_counts": [i["regrid_count"] for i in infos],
        "min_det": [float(d.det().min()) for d in deformations],
        "frames": recon,
        "wall_time": time.perf_counter() - t0,
    }
    return u, deformations, diag

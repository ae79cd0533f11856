"""Estimator wrappers around the joint and sequential solvers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .operators import SystemOperator
from .phantom import Dataset
from .solver import SolverParams, solve_joint, solve_sequential


def check_kspace(X):
    """Validate a k-space stack and return it as complex ``(T, ny, nx)``."""
    if isinstance(X, Dataset):
        return X.kspace
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(f"expected k-space of shape (T, ny, nx), got {X.shape}")
    if X.shape[0] == 0 or min(X.shape[1:]) < 2:
        raise ValueError(f"k-space stack {X.shape} is empty or degenerate")
    X = X.astype(complex, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("k-space contains NaN or infinity")
    return X


def check_masks(masks, shape):
    """Validate sampling masks against a k-space stack shape."""
    if masks is None:
        return np.ones(shape, dtype=bool)
    masks = np.asarray(masks)
    if masks.shape == shape[1:]:
        masks = np.broadcast_to(masks, shape)
    if masks.shape != shape:
        raise ValueError(f"masks of shape {masks.shape} do not match k-space {shape}")
    if masks.dtype != bool:
        if not np.all((masks == 0) | (masks == 1)):
            raise ValueError("masks must be boolean")
        masks = masks.astype(bool)
    return np.ascontiguousarray(masks)


def check_factor(factor, lr_shape):
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    return factor


class _ReconstructorBase(BaseEstimator, TransformerMixin):
    """Shared parameter handling; every constructor argument is a solver parameter."""

    def __init__(self, factor=2, a1=1.0, a2=50.0, gamma1=5.0, gamma2=1e5, gamma3=15.0, theta=5.0,
                 sigma=1.5, levels_k=2, iters_Nn=500, alpha=0.01, dt=1e-3, phi_dt=1.0,
                 regrid_tol=0.05, delta_weight=1.0, outer_iters=200, blur_sigma=1.0):
        self.factor = factor
        self.a1 = a1
        self.a2 = a2
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.gamma3 = gamma3
        self.theta = theta
        self.sigma = sigma
        self.levels_k = levels_k
        self.iters_Nn = iters_Nn
        self.alpha = alpha
        self.dt = dt
        self.phi_dt = phi_dt
        self.regrid_tol = regrid_tol
        self.delta_weight = delta_weight
        self.outer_iters = outer_iters
        self.blur_sigma = blur_sigma

    def solver_params(self):
        p = self.get_params()
        p.pop("factor")
        p.pop("h_mode", None)
        return SolverParams(**p)

    def _dataset(self, X, masks):
        if isinstance(X, Dataset):
            return X
        X = check_kspace(X)
        masks = check_masks(masks, X.shape)
        factor = check_factor(self.factor, X.shape[1:])
        hr = (X.shape[1] * factor, X.shape[2] * factor)
        return Dataset(X, masks, hr, factor, 0.0)

    def fit(self, X, y=None, masks=None):
        """Reconstruct from a k-space stack ``X`` of shape ``(T, ny, nx)`` or a Dataset.

        ``y`` is ignored. ``masks`` defaults to full sampling.
        """
        params = self.solver_params()
        ds = self._dataset(X, masks)
        self.u_, self.deformations_, self.diagnostics_ = self._solve(ds, params)
        self.n_frames_ = ds.T
        self.hr_shape_ = ds.hr_shape
        self.energy_trace_ = np.asarray(self.diagnostics_.get("energy", []), dtype=float)
        return self

    def transform(self, X=None):
        """The fitted high-resolution image (the input is not used)."""
        check_is_fitted(self, "u_")
        return self.u_

    def predict(self, X=None):
        return self.transform(X)

    def forward(self):
        """Frame-resolution image ``C u`` of the fitted reconstruction."""
        check_is_fitted(self, "u_")
        return SystemOperator(self.hr_shape_, int(self.factor), self.blur_sigma).apply(self.u_)


class JointReconstructor(_ReconstructorBase):
    """Joint reconstruction, registration and super-resolution.

    Attributes
    ----------
    u_ : ndarray
        High-resolution image.
    deformations_ : list of Deformation
        One frame-grid deformation per frame.
    energy_trace_ : ndarray
        Total energy after every outer sweep.
    """

    def __init__(self, factor=2, a1=1.0, a2=50.0, gamma1=5.0, gamma2=1e5, gamma3=15.0, theta=5.0,
                 sigma=1.5, levels_k=2, iters_Nn=500, alpha=0.01, dt=1e-3, phi_dt=1.0,
                 regrid_tol=0.05, delta_weight=1.0, outer_iters=200, blur_sigma=1.0, h_mode="cg"):
        super().__init__(factor, a1, a2, gamma1, gamma2, gamma3, theta, sigma, levels_k, iters_Nn, alpha,
                         dt, phi_dt, regrid_tol, delta_weight, outer_iters, blur_sigma)
        self.h_mode = h_mode

    def _solve(self, ds, params):
        if self.h_mode not in ("cg", "diagonal"):
            raise ValueError(f"h_mode must be 'cg' or 'diagonal', got {self.h_mode!r}")
        return solve_joint(ds, params, self.h_mode)


class SequentialReconstructor(_ReconstructorBase):
    """Reconstruct frames, register them to frame 0, then super-resolve."""

    def _solve(self, ds, params):
        return solve_sequential(ds, params)

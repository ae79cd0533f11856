"""Acquisition operators: undersampled Fourier ``F = S A`` and ``C = D B``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import fft2, ifft2


def make_mask(ny, nx, acceleration, center_fraction=0.08, seed=0):
    """Cartesian row-undersampling mask (DC at row 0).

    A band of ``ceil(center_fraction * ny)`` low-frequency rows is always
    kept; further rows are drawn uniformly at random without replacement
    until ``round(ny / acceleration)`` rows are kept.

    Returns
    -------
    ndarray of bool, shape ``(ny, nx)``
    """
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if not 0 <= center_fraction < 1:
        raise ValueError(f"center_fraction must be in [0, 1), got {center_fraction}")
    n_keep = max(1, min(ny, int(round(ny / acceleration))))
    n_center = min(n_keep, int(math.ceil(center_fraction * ny)))

    # rows indexed with DC in the middle, shifted back at the end
    centered = np.zeros(ny, dtype=bool)
    start = ny // 2 - n_center // 2
    centered[start:start + n_center] = True
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(~centered)
    extra = rng.choice(free, size=n_keep - n_center, replace=False)
    centered[extra] = True

    rows = np.fft.ifftshift(centered)
    return np.repeat(rows[:, None], nx, axis=1)


def _check_shape(a, mask):
    if a.shape != mask.shape:
        raise ValueError(f"shape {a.shape} does not match mask {mask.shape}")


def apply_F(u, mask):
    """``mask * fft2(u)``."""
    u = np.asarray(u)
    _check_shape(u, mask)
    return np.where(mask, fft2(u), 0.0)


def apply_F_adjoint(x, mask):
    """``Re(ifft2(mask * x))``, the adjoint of :func:`apply_F` on real images."""
    x = np.asarray(x)
    _check_shape(x, mask)
    return ifft2(np.where(mask, x, 0.0)).real


def zero_filled(x, mask):
    return apply_F_adjoint(x, mask)


@lru_cache(maxsize=64)
def _blur_matrix(n, sigma):
    """1-D Gaussian blur with half-sample symmetric boundary, as a dense matrix."""
    if sigma <= 0:
        return np.eye(n)
    r = int(math.ceil(3.0 * sigma))
    taps = np.arange(-r, r + 1)
    w = np.exp(-0.5 * (taps / sigma) ** 2)
    w /= w.sum()
    B = np.zeros((n, n))
    for i in range(n):
        for k, wk in zip(taps, w):
            j = i + k
            # fold repeatedly in case the kernel is wider than the grid
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            B[i, j] += wk
    B.setflags(write=False)
    return B


@lru_cache(maxsize=64)
def _pool_matrix(n, d):
    P = np.zeros((n // d, n))
    for i in range(n // d):
        P[i, i * d:(i + 1) * d] = 1.0 / d
    P.setflags(write=False)
    return P


@dataclass(frozen=True)
class SystemOperator:
    """Super-resolution operator ``C = D B``: Gaussian blur, then ``d x d`` averaging.

    Both stages are separable, so ``C u = Cy @ u @ Cx.T`` with small dense
    factor matrices and the adjoint is exact by construction.
    """

    hr_shape: tuple
    factor: int = 2
    blur_sigma: float = 1.0
    _cy: np.ndarray = field(init=False, repr=False, compare=False)
    _cx: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        hy, hx = (int(s) for s in self.hr_shape)
        d = int(self.factor)
        if d < 1:
            raise ValueError(f"downsample factor must be a positive integer, got {self.factor}")
        if hy % d or hx % d:
            raise ValueError(f"high-resolution shape {self.hr_shape} not divisible by {d}")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        object.__setattr__(self, "hr_shape", (hy, hx))
        object.__setattr__(self, "_cy", _pool_matrix(hy, d) @ _blur_matrix(hy, float(self.blur_sigma)))
        object.__setattr__(self, "_cx", _pool_matrix(hx, d) @ _blur_matrix(hx, float(self.blur_sigma)))

    @property
    def lr_shape(self):
        return (self.hr_shape[0] // self.factor, self.hr_shape[1] // self.factor)

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != self.hr_shape:
            raise ValueError(f"expected high-resolution shape {self.hr_shape}, got {u.shape}")
        return self._cy @ u @ self._cx.T

    def adjoint(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape != self.lr_shape:
            raise ValueError(f"expected low-resolution shape {self.lr_shape}, got {f.shape}")
        return self._cy.T @ f @ self._cx

    def normal(self, u):
        return self.adjoint(self.apply(u))

    def solve_normal(self, r, c):
        """``(I + c C^T C)^{-1} r`` by the eigendecompositions of the separable factors."""
        (ly, qy), (lx, qx) = self._eig()
        rhat = qy.T @ np.asarray(r, dtype=float) @ qx
        return qy @ (rhat / (1.0 + c * np.outer(ly, lx))) @ qx.T

    def _eig(self):
        cached = self.__dict__.get("_eig_cache")
        if cached is None:
            cached = (np.linalg.eigh(self._cy.T @ self._cy), np.linalg.eigh(self._cx.T @ self._cx))
            object.__setattr__(self, "_eig_cache", cached)
        return cached

    def coarsened(self):
        """The same operator on a grid with half the resolution."""
        hy, hx = self.hr_shape
        d = self.factor
        return SystemOperator(
            (-(-hy // (2 * d)) * d, -(-hx // (2 * d)) * d), d, 0.5 * self.blur_sigma
        )


def apply_C(u, op):
    return op.apply(u)


def apply_C_adjoint(f, op):
    return op.adjoint(f)

"""Dense 2-D fields and the discrete operators shared by every other module.

Array conventions
-----------------
* scalar field: ``(ny, nx)`` float64
* complex field: ``(ny, nx)`` complex128
* vector field: ``(2, ny, nx)``; component 0 is the y (row) direction,
  component 1 the x (column) direction
* matrix field: ``(2, 2, ny, nx)``; entry ``[i, j]`` is the derivative of
  component ``i`` along axis ``j``

Differences are forward with a Neumann boundary (the last difference along
an axis is zero) and ``divergence`` is their exact negative adjoint.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def gradient(f):
    """Forward-difference gradient of a scalar field, shape ``(2, ny, nx)``."""
    f = np.asarray(f, dtype=float)
    g = np.zeros((2,) + f.shape)
    g[0, :-1, :] = f[1:, :] - f[:-1, :]
    g[1, :, :-1] = f[:, 1:] - f[:, :-1]
    return g


def divergence(v):
    """Backward-difference divergence, the negative adjoint of :func:`gradient`.

    ``<gradient(f), v> == -<f, divergence(v)>`` holds for every pair.
    """
    v = np.asarray(v, dtype=float)
    py, px = v[0], v[1]
    d = np.zeros(py.shape)

    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] -= py[-2, :]

    d[:, 0] += px[:, 0]
    d[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    d[:, -1] -= px[:, -2]
    return d


def laplacian(f):
    """5-point Laplacian, identical to ``divergence(gradient(f))``."""
    return divergence(gradient(f))


def inner(a, b):
    """Real inner product; complex arrays are treated as paired reals."""
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.real(np.vdot(a, b)))


def sample(f, coords):
    """Bilinear samples of ``f`` at fractional ``(y, x)`` pixel coordinates.

    Coordinates outside the grid are clamped to the nearest edge pixel.
    """
    return ndimage.map_coordinates(np.asarray(f, dtype=float), coords, order=1, mode="nearest")


def identity_coords(shape):
    ny, nx = shape
    yy, xx = np.meshgrid(np.arange(ny, dtype=float), np.arange(nx, dtype=float), indexing="ij")
    return np.stack([yy, xx])


def warp(f, displacement):
    """Return ``f o phi`` for ``phi = Id + displacement``.

    ``displacement`` may be a ``(2, ny, nx)`` array or anything exposing a
    ``displacement`` attribute (a :class:`~vmtrecon.registration.Deformation`).
    """
    v = getattr(displacement, "displacement", displacement)
    v = np.asarray(v, dtype=float)
    f = np.asarray(f, dtype=float)
    if v.shape[1:] != f.shape:
        raise ValueError(f"field shape {f.shape} does not match deformation {v.shape[1:]}")
    if not v.any():
        return f.copy()
    return sample(f, identity_coords(f.shape) + v)


def jacobian(displacement):
    """Per-pixel ``I + grad(v)`` of the map ``Id + v``, shape ``(2, 2, ny, nx)``."""
    v = np.asarray(getattr(displacement, "displacement", displacement), dtype=float)
    m = np.empty((2, 2) + v.shape[1:])
    m[0] = gradient(v[0])
    m[1] = gradient(v[1])
    m[0, 0] += 1.0
    m[1, 1] += 1.0
    return m


def determinant(m):
    """``m11 * m22 - m12 * m21`` per pixel."""
    m = np.asarray(m, dtype=float)
    return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]


def fft2(f):
    """Unitary 2-D DFT with the DC term at index ``(0, 0)``."""
    return np.fft.fft2(f, norm="ortho")


def ifft2(F):
    """Inverse of :func:`fft2` (also its adjoint)."""
    return np.fft.ifft2(F, norm="ortho")


def restrict(f):
    """2x2 block average; odd dimensions are padded by edge replication first."""
    f = np.asarray(f, dtype=float)
    ny, nx = f.shape
    pad = ((0, ny % 2), (0, nx % 2))
    if any(p[1] for p in pad):
        f = np.pad(f, pad, mode="edge")
    return 0.25 * (f[0::2, 0::2] + f[1::2, 0::2] + f[0::2, 1::2] + f[1::2, 1::2])


def prolong(f, shape=None):
    """Bilinear upsampling by 2 (cell-centred), cropped to ``shape`` if given."""
    f = np.asarray(f, dtype=float)
    ny, nx = f.shape
    if shape is None:
        shape = (2 * ny, 2 * nx)
    yy = (np.arange(shape[0]) + 0.5) / 2.0 - 0.5
    xx = (np.arange(shape[1]) + 0.5) / 2.0 - 0.5
    coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    return sample(f, coords)


def restrict_displacement(v):
    """Restrict a displacement field; pixel units halve with the grid."""
    v = np.asarray(v, dtype=float)
    return 0.5 * np.stack([restrict(v[0]), restrict(v[1])])


def prolong_displacement(v, shape=None):
    """Prolong a displacement field; values are doubled to stay in pixel units."""
    v = np.asarray(v, dtype=float)
    return 2.0 * np.stack([prolong(v[0], shape), prolong(v[1], shape)])

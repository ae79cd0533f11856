"""Synthetic ground truth: ellipse phantoms, breathing-like motion, simulated k-space.

Also holds the :class:`Dataset` container and its binary file format::

    "VMTD" | version u32 | flags u32 | T u32 | hr_ny u32 | hr_nx u32
    | lr_ny u32 | lr_nx u32 | d u32 | sigma_n f64
    | per frame: mask (lr_ny*lr_nx bytes), k-space (lr_ny*lr_nx complex f64 pairs)
    | [flags & 1] u_gt (hr_ny*hr_nx f64), per frame v_t (y plane, x plane)
    | CRC32 of everything before it

All numbers little-endian, arrays row-major.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import grid
from .operators import SystemOperator, apply_F, make_mask
from .registration import Deformation, invert_deformation

MAGIC = b"VMTD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIId")


class DatasetFormatError(ValueError):
    """Raised for malformed or corrupted dataset files."""


# ---------------------------------------------------------------------------
# phantom


@dataclass(frozen=True)
class Ellipse:
    center: tuple  # (y, x) in the unit square
    axes: tuple  # (semi-axis along y, semi-axis along x) before rotation
    angle: float = 0.0  # radians, counter-clockwise
    intensity: float = 1.0


def default_ellipses():
    """Abdomen-like slice: body, organs of several sizes, small vessels."""
    E = Ellipse
    return [
        E((0.50, 0.50), (0.40, 0.44), 0.0, 0.25),
        E((0.42, 0.32), (0.16, 0.10), 0.3, 0.60),
        E((0.44, 0.67), (0.13, 0.12), -0.2, 0.45),
        E((0.66, 0.50), (0.12, 0.22), 0.0, 0.75),
        E((0.66, 0.50), (0.05, 0.10), 0.0, 0.35),
        E((0.30, 0.50), (0.05, 0.05), 0.0, 1.00),
        E((0.42, 0.30), (0.030, 0.030), 0.0, 0.95),
        E((0.47, 0.36), (0.020, 0.020), 0.0, 0.95),
        E((0.78, 0.34), (0.04, 0.025), 0.5, 0.90),
        E((0.78, 0.66), (0.04, 0.025), -0.5, 0.90),
        E((0.46, 0.68), (0.025, 0.06), 0.0, 0.15),
        E((0.58, 0.22), (0.015, 0.015), 0.0, 0.85),
        E((0.58, 0.78), (0.015, 0.015), 0.0, 0.85),
    ]


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple = field(default_factory=lambda: tuple(default_ellipses()))
    background: float = 0.0
    shape: tuple = (128, 128)
    smoothing: float = 0.5

    def __post_init__(self):
        for e in self.ellipses:
            if not 0.0 <= e.intensity <= 1.0:
                raise ValueError(f"ellipse intensity {e.intensity} outside [0, 1]")
            cy, cx = e.center
            if not (0.0 <= cy <= 1.0 and 0.0 <= cx <= 1.0) or max(e.axes) > 0.5:
                raise ValueError(f"ellipse {e} does not fit the unit square")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background intensity outside [0, 1]")


def make_phantom(spec=PhantomSpec()):
    """Rasterise the ellipses (later ones overwrite) and smooth by ``spec.smoothing`` px."""
    ny, nx = spec.shape
    yy, xx = np.meshgrid((np.arange(ny) + 0.5) / ny, (np.arange(nx) + 0.5) / nx, indexing="ij")
    img = np.full((ny, nx), float(spec.background))
    for e in spec.ellipses:
        dy, dx = yy - e.center[0], xx - e.center[1]
        c, s = np.cos(e.angle), np.sin(e.angle)
        ry = c * dy - s * dx
        rx = s * dy + c * dx
        inside = (ry / e.axes[0]) ** 2 + (rx / e.axes[1]) ** 2 <= 1.0
        img[inside] = e.intensity
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing, mode="nearest")
    return img


# ---------------------------------------------------------------------------
# motion


def _profile(s):
    """Unit bump on [0, 1]: zero with zero slope at both ends, peak 1 at s = 2/3."""
    s = np.clip(s, 0.0, 1.0)
    return (27.0 / 4.0) ** 2 * (s ** 2 * (1.0 - s)) ** 2


def _dprofile(s):
    s = np.clip(s, 0.0, 1.0)
    q = s ** 2 * (1.0 - s)
    return (27.0 / 4.0) ** 2 * 2.0 * q * (2.0 * s - 3.0 * s ** 2)


@dataclass(frozen=True)
class MotionSpec:
    """Breathing-like head-foot motion ``v_t = A sin(2 pi t / P + phase) b(x) e_y``.

    ``b`` is largest in the lower (inferior) part of the grid, decays
    upwards and vanishes on the boundary. ``A`` is in pixels of the frame grid.
    """

    amplitude: float = 4.0
    period: float = 8.0
    phase: float = 0.0
    smoothness: float = 1.0  # exponent on the x profile; larger = narrower
    shape: tuple = (64, 64)

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.min_det() <= 0.2:
            raise ValueError(f"amplitude {self.amplitude} folds the grid (min det {self.min_det():.3f} <= 0.2)")

    def _s(self):
        ny, nx = self.shape
        sy = np.arange(ny) / (ny - 1)
        sx = np.arange(nx) / (nx - 1)
        return sy, sx, ny - 1

    def bump(self):
        sy, sx, _ = self._s()
        return _profile(sy)[:, None] * (np.sin(np.pi * sx) ** 2)[None, :] ** self.smoothness

    def bump_dy(self):
        sy, sx, L = self._s()
        return (_dprofile(sy) / L)[:, None] * (np.sin(np.pi * sx) ** 2)[None, :] ** self.smoothness

    def scale(self, t):
        return self.amplitude * np.sin(2.0 * np.pi * t / self.period + self.phase)

    def min_det(self):
        # det = 1 + a * db/dy with a in [-A, A]
        g = self.bump_dy()
        return float(1.0 - abs(self.amplitude) * np.abs(g).max())


def make_motion(spec, t):
    """Deformation of frame ``t``."""
    v = np.zeros((2,) + tuple(spec.shape))
    v[0] = spec.scale(t) * spec.bump()
    return Deformation(v)


def motion_det(spec, t):
    """Analytic ``det grad(phi_t)`` (motion is along y only)."""
    return 1.0 + spec.scale(t) * spec.bump_dy()


def invert_motion(spec, t, newton_iters=30):
    """Inverse of :func:`make_motion` by per-pixel Newton iterations on the analytic profile."""
    a = spec.scale(t)
    ny, nx = spec.shape
    L = ny - 1
    sx = np.arange(nx) / (nx - 1)
    wx = (np.sin(np.pi * sx) ** 2) ** spec.smoothness
    target = np.arange(ny, dtype=float)[:, None] * np.ones((1, nx))
    y = target.copy()
    for _ in range(newton_iters):
        s = y / L
        r = y + a * _profile(s) * wx - target
        dr = 1.0 + a * _dprofile(s) / L * wx
        y = y - r / dr
    w = np.zeros((2, ny, nx))
    w[0] = y - target
    return Deformation(w)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    """Undersampled k-space frames plus (optionally) their ground truth."""

    kspace: np.ndarray  # (T, ny, nx) complex
    masks: np.ndarray  # (T, ny, nx) bool
    hr_shape: tuple
    factor: int
    sigma_n: float = 0.0
    u_gt: np.ndarray | None = None
    v_gt: np.ndarray | None = None  # (T, 2, ny, nx)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kspace = np.asarray(self.kspace, dtype=complex)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.kspace.ndim != 3 or self.kspace.shape != self.masks.shape:
            raise ValueError(f"k-space {self.kspace.shape} and masks {self.masks.shape} must be equal (T, ny, nx) stacks")
        if len(self.kspace) == 0:
            raise ValueError("dataset has no frames")
        self.hr_shape = tuple(int(s) for s in self.hr_shape)
        self.factor = int(self.factor)
        if (self.hr_shape[0] // self.factor, self.hr_shape[1] // self.factor) != self.lr_shape:
            raise ValueError(f"hr shape {self.hr_shape} / {self.factor} does not match frames {self.lr_shape}")
        if self.v_gt is not None:
            self.v_gt = np.asarray(self.v_gt, dtype=float)
            if self.v_gt.shape != (self.T, 2) + self.lr_shape:
                raise ValueError(f"ground-truth displacements have shape {self.v_gt.shape}")
        if self.u_gt is not None:
            self.u_gt = np.asarray(self.u_gt, dtype=float)
            if self.u_gt.shape != self.hr_shape:
                raise ValueError(f"ground-truth image has shape {self.u_gt.shape}")

    @property
    def T(self):
        return self.kspace.shape[0]

    @property
    def lr_shape(self):
        return self.kspace.shape[1:]

    @property
    def has_ground_truth(self):
        return self.u_gt is not None and self.v_gt is not None

    def zero_filled(self):
        """``F^* x_t`` for every frame, shape ``(T, ny, nx)``."""
        return np.stack([grid.ifft2(np.where(m, x, 0)).real for x, m in zip(self.kspace, self.masks)])


def simulate_acquisition(u_gt, motions, system_op, masks, sigma_n=0.01, seed=0, inverses=None):
    """Frames ``x_t = F_t((C u) o phi_t^{-1}) + noise``.

    ``inverses`` may carry exact inverse deformations; otherwise they are
    computed numerically. Complex noise with standard deviation ``sigma_n``
    per real component is added on kept samples only.
    """
    u_gt = np.asarray(u_gt, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    T = len(motions)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (T,) + masks.shape).copy()
    if len(masks) != T:
        raise ValueError(f"{len(masks)} masks for {T} frames")
    Cu = system_op.apply(u_gt)
    if masks.shape[1:] != Cu.shape:
        raise ValueError(f"mask shape {masks.shape[1:]} does not match frame shape {Cu.shape}")
    rng = np.random.default_rng(seed)
    kspace = np.zeros(masks.shape, dtype=complex)
    for t, phi in enumerate(motions):
        if phi.shape != Cu.shape:
            raise ValueError(f"motion {t} has shape {phi.shape}, frames are {Cu.shape}")
        inv = inverses[t] if inverses is not None else invert_deformation(phi, max_iter=200, tol_px=1e-8)
        x = apply_F(grid.warp(Cu, inv), masks[t])
        if sigma_n > 0:
            noise = sigma_n * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
            x = x + np.where(masks[t], noise, 0)
        kspace[t] = x
    v_gt = np.stack([phi.displacement for phi in motions])
    return Dataset(kspace, masks, system_op.hr_shape, system_op.factor, float(sigma_n), u_gt.copy(), v_gt)


def make_default_dataset(acceleration=4.0, T=8, hr_shape=(128, 128), factor=2, blur_sigma=1.0,
                         amplitude=4.0, period=8.0, phase=0.0, sigma_n=0.01, center_fraction=0.08, seed=0):
    """Desk-scale moving phantom with one fresh mask per frame."""
    op = SystemOperator(hr_shape, factor, blur_sigma)
    u_gt = make_phantom(PhantomSpec(shape=tuple(hr_shape)))
    mspec = MotionSpec(amplitude=amplitude, period=period, phase=phase, shape=op.lr_shape)
    motions = [make_motion(mspec, t) for t in range(T)]
    inverses = [invert_motion(mspec, t) for t in range(T)]
    ny, nx = op.lr_shape
    masks = np.stack([make_mask(ny, nx, acceleration, center_fraction, seed=seed * 1000 + t) for t in range(T)])
    ds = simulate_acquisition(u_gt, motions, op, masks, sigma_n, seed, inverses)
    ds.meta.update(acceleration=acceleration, seed=seed, amplitude=amplitude, period=period,
                   phase=phase, blur_sigma=blur_sigma, center_fraction=center_fraction)
    return ds


def dataset_to_bytes(ds):
    ny, nx = ds.lr_shape
    flags = 1 if ds.has_ground_truth else 0
    parts = [_HEADER.pack(MAGIC, VERSION, flags, ds.T, ds.hr_shape[0], ds.hr_shape[1], ny, nx, ds.factor, float(ds.sigma_n))]
    for m, x in zip(ds.masks, ds.kspace):
        parts.append(m.astype("u1").tobytes())
        parts.append(np.ascontiguousarray(x, dtype="<c16").tobytes())
    if flags:
        parts.append(np.ascontiguousarray(ds.u_gt, dtype="<f8").tobytes())
        for v in ds.v_gt:
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def dataset_from_bytes(blob):
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError("file truncated")
    magic, version, flags, T, hy, hx, ny, nx, d, sigma_n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    n = ny * nx
    expected = _HEADER.size + T * (n + 16 * n) + (8 * hy * hx + T * 16 * n if flags & 1 else 0) + 4
    if len(blob) != expected:
        raise DatasetFormatError(f"file has {len(blob)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise DatasetFormatError("checksum mismatch")
    off = _HEADER.size
    masks = np.empty((T, ny, nx), dtype=bool)
    kspace = np.empty((T, ny, nx), dtype=complex)
    for t in range(T):
        masks[t] = np.frombuffer(blob, "u1", n, off).reshape(ny, nx) != 0
        off += n
        kspace[t] = np.frombuffer(blob, "<c16", n, off).reshape(ny, nx)
        off += 16 * n
    u_gt = v_gt = None
    if flags & 1:
        u_gt = np.frombuffer(blob, "<f8", hy * hx, off).reshape(hy, hx).copy()
        off += 8 * hy * hx
        v_gt = np.frombuffer(blob, "<f8", T * 2 * n, off).reshape(T, 2, ny, nx).copy()
    return Dataset(kspace, masks, (hy, hx), d, sigma_n, u_gt, v_gt)


def save_dataset(ds, path):
    """Write ``ds`` to ``path``; returns the CRC32 stored in the file trailer."""
    blob = dataset_to_bytes(ds)
    Path(path).write_bytes(blob)
    return zlib.crc32(blob[:-4])


def load_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())

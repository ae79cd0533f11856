"""Command-line driver: ``simulate``, ``reconstruct`` and ``evaluate``.

Configuration is a flat ``key=value`` file (``#`` starts a comment); any
key may be overridden on the command line as ``--key=value``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__, grid
from .operators import SystemOperator
from .phantom import DatasetFormatError, load_dataset, make_default_dataset, save_dataset
from .registration import Deformation, det_inverse_jacobian, invert_deformation
from .solver import SolverParams, solve_joint, solve_sequential

log = logging.getLogger("vmtrecon")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


_SOLVER_FIELDS = {f.name: f for f in fields(SolverParams)}


@dataclass
class RunConfig:
    """Solver parameters plus dataset, output and export settings."""

    solver: SolverParams = field(default_factory=SolverParams)
    mode: str = "joint"
    h_mode: str = "cg"
    dataset: str = "dataset.vmtd"
    out: str = "result"
    seed: int = 0
    accel: float = 4.0
    frames: int = 8
    hr_size: int = 128
    factor: int = 2
    amplitude: float = 4.0
    period: float = 8.0
    phase: float = 0.0
    sigma_n: float = 0.01
    center_fraction: float = 0.08
    export_pgm: bool = True
    export_intermediates: bool = True

    def validate(self):
        if self.mode not in ("joint", "sequential"):
            raise ConfigError(f"mode: expected joint or sequential, got {self.mode!r}")
        if self.h_mode not in ("cg", "diagonal"):
            raise ConfigError(f"h_mode: expected cg or diagonal, got {self.h_mode!r}")
        for key in ("frames", "hr_size", "factor"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be positive")
        if self.accel < 1:
            raise ConfigError("accel: must be >= 1")
        if self.hr_size % self.factor:
            raise ConfigError("hr_size: must be divisible by factor")
        if self.sigma_n < 0:
            raise ConfigError("sigma_n: must be non-negative")
        if not 0 <= self.center_fraction < 1:
            raise ConfigError("center_fraction: must lie in [0, 1)")
        if self.period <= 0:
            raise ConfigError("period: must be positive")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")
        return self

    def items(self):
        d = {k: v for k, v in asdict(self).items() if k != "solver"}
        d.update(asdict(self.solver))
        return d


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "solver"}
CONFIG_KEYS = tuple(sorted(set(_SOLVER_FIELDS) | set(_RUN_FIELDS)))


def _convert(key, raw, kind):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            x = float(raw)
            if x != int(x):
                raise ValueError(raw)
            return int(x)
        if kind in (float, "float"):
            x = float(raw)
            if not math.isfinite(x):
                raise ValueError(raw)
            return x
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def read_config_file(path):
    """``key=value`` pairs of a config file, in order."""
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def parse_config(path=None, overrides=None):
    """Build a :class:`RunConfig` from a file and ``--key=value`` overrides.

    Unset keys keep their defaults (the dataset-1 parameter column).
    Unknown keys, unparsable values and invariant violations raise
    :class:`ConfigError` naming the key.
    """
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    solver_kw, run_kw = {}, {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key in _SOLVER_FIELDS:
            solver_kw[key] = _convert(key, str(raw), _SOLVER_FIELDS[key].type)
        elif key in _RUN_FIELDS:
            run_kw[key] = _convert(key, str(raw), _RUN_FIELDS[key].type)
        else:
            raise ConfigError(f"{key}: unknown configuration key")
    try:
        solver = SolverParams(**solver_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(solver=solver, **run_kw).validate()


# ---------------------------------------------------------------------------
# file helpers


def write_raw(path, a):
    np.ascontiguousarray(a, dtype="<f8").tofile(path)


def read_raw(path, shape):
    a = np.fromfile(path, dtype="<f8")
    if a.size != math.prod(shape):
        raise OSError(f"{path}: expected {math.prod(shape)} values, found {a.size}")
    return a.reshape(shape)


def write_pgm(path, img, lo=None, hi=None):
    """8-bit binary PGM, linearly windowed to ``[lo, hi]`` (min/max by default)."""
    img = np.asarray(img, dtype=float)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(q.tobytes())
    return lo, hi


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out[k] = v
    return out


def _write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in entries.items():
            fh.write(f"{k}={v}\n")


def _dims(s):
    return tuple(int(x) for x in s.split())


# ---------------------------------------------------------------------------
# metrics


def psnr(u, ref):
    """PSNR in dB with the peak taken as ``max(ref)``; ``inf`` for an exact match."""
    mse = float(np.mean((np.asarray(u) - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.max(ref)) ** 2 / mse)


def ssim(u, ref):
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    from skimage.metrics import structural_similarity

    rng = float(ref.max() - ref.min()) or 1.0
    return float(structural_similarity(u, ref, data_range=rng, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, K1=0.01, K2=0.03))


def endpoint_errors(v, v_gt):
    """Mean per-pixel endpoint error of each frame, shape ``(T,)``."""
    v = np.asarray(v)
    return np.sqrt(((v - v_gt) ** 2).sum(axis=1)).mean(axis=(1, 2))


def difference_maps(frames, deformations, u, zero_filled, op, reference=0):
    """Uncorrected ``mean_t |zf_t - zf_ref|`` and corrected ``mean_t |h_t o phi_t - C u|``."""
    unc = np.mean([np.abs(z - zero_filled[reference]) for z in zero_filled], axis=0)
    Cu = op.apply(u)
    cor = np.mean([np.abs(grid.warp(h, d) - Cu) for h, d in zip(frames, deformations)], axis=0)
    return unc, cor


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg):
    ds = make_default_dataset(
        acceleration=cfg.accel, T=cfg.frames, hr_shape=(cfg.hr_size, cfg.hr_size), factor=cfg.factor,
        blur_sigma=cfg.solver.blur_sigma, amplitude=cfg.amplitude, period=cfg.period, phase=cfg.phase,
        sigma_n=cfg.sigma_n, center_fraction=cfg.center_fraction, seed=cfg.seed,
    )
    crc = save_dataset(ds, cfg.dataset)
    print(f"wrote {cfg.dataset}: T={ds.T} frames {ds.lr_shape[0]}x{ds.lr_shape[1]} -> "
          f"{ds.hr_shape[0]}x{ds.hr_shape[1]}, acceleration {cfg.accel:g}, sigma_n {cfg.sigma_n:g}, "
          f"seed {cfg.seed}, crc32 {crc:08x}")
    return ds


def cmd_reconstruct(cfg):
    ds = load_dataset(cfg.dataset)
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if cfg.mode == "joint":
            u, defs, diag = solve_joint(ds, cfg.solver, cfg.h_mode)
        else:
            u, defs, diag = solve_sequential(ds, cfg.solver)
    except FloatingPointError as exc:
        raise NumericalFailure(f"solver failed: {exc}") from exc
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(u)):
        raise NumericalFailure("reconstruction is not finite")

    write_raw(os.path.join(cfg.out, "u.f64.raw"), u)
    windows = {}
    if cfg.export_pgm:
        windows["u.pgm"] = write_pgm(os.path.join(cfg.out, "u.pgm"), u)
    for t, (d, h) in enumerate(zip(defs, diag["frames"])):
        write_raw(os.path.join(cfg.out, f"v_t_{t}.f64.raw"), d.displacement)
        write_raw(os.path.join(cfg.out, f"h_t_{t}.f64.raw"), h)
    if cfg.mode == "sequential" and cfg.export_intermediates:
        for t in range(ds.T):
            for stage in ("stage1", "stage2"):
                name = f"{stage}_{t}.pgm"
                windows[name] = write_pgm(os.path.join(cfg.out, name), diag[stage][t])

    if "breakdowns" in diag:
        _write_energy(os.path.join(cfg.out, "energy.csv"), diag["breakdowns"])
    else:
        _write_energy(os.path.join(cfg.out, "energy.csv"), [])

    manifest = {
        "vmtrecon_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "mode": cfg.mode,
        "h_mode": cfg.h_mode,
        "dataset": os.path.abspath(cfg.dataset),
        "u_dims": f"{u.shape[0]} {u.shape[1]}",
        "v_dims": f"2 {ds.lr_shape[0]} {ds.lr_shape[1]}",
        "frames": ds.T,
        "factor": ds.factor,
        "wall_time_s": f"{wall:.3f}",
        "regrid_counts": " ".join(str(c) for c in diag["regrid_counts"]),
        "ssim_constants": "K1=0.01 K2=0.03 window=gaussian sigma=1.5 size=11",
    }
    manifest.update({f"config.{k}": v for k, v in cfg.items().items()})
    manifest.update({f"window.{k}": f"{lo:.17g} {hi:.17g}" for k, (lo, hi) in windows.items()})
    _write_manifest(os.path.join(cfg.out, "manifest.txt"), manifest)
    print(f"reconstructed ({cfg.mode}) in {wall:.1f} s -> {cfg.out}")
    return u, defs, diag


def _write_energy(path, breakdowns):
    from .solver import EnergyBreakdown

    cols = list(EnergyBreakdown.TERMS) + ["total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + cols)
        for i, b in enumerate(breakdowns):
            w.writerow([i] + [repr(float(b[c])) for c in cols])


def load_result(out, ds):
    manifest = read_manifest(os.path.join(out, "manifest.txt"))
    u = read_raw(os.path.join(out, "u.f64.raw"), _dims(manifest["u_dims"]))
    vshape = _dims(manifest["v_dims"])
    defs = [Deformation(read_raw(os.path.join(out, f"v_t_{t}.f64.raw"), vshape)) for t in range(ds.T)]
    frames = np.stack([read_raw(os.path.join(out, f"h_t_{t}.f64.raw"), vshape[1:]) for t in range(ds.T)])
    return manifest, u, defs, frames


def cmd_evaluate(cfg):
    """Metrics and diagnostic maps from the files written by ``reconstruct``."""
    ds = load_dataset(cfg.dataset)
    try:
        manifest, u, defs, frames = load_result(cfg.out, ds)
    except (KeyError, FileNotFoundError) as exc:
        raise OSError(f"missing result data in {cfg.out}: {exc}") from exc
    blur = float(manifest.get("config.blur_sigma", cfg.solver.blur_sigma))
    op = SystemOperator(ds.hr_shape, ds.factor, blur)
    if u.shape != ds.hr_shape:
        raise OSError(f"result image {u.shape} does not match dataset {ds.hr_shape}")
    unc, cor = difference_maps(frames, defs, u, ds.zero_filled(), op)

    rows = [("frames", ds.T)]
    if ds.has_ground_truth:
        p = psnr(u, ds.u_gt)
        rows.append(("psnr_db", "inf" if math.isinf(p) else repr(p)))
        rows.append(("psnr_exact", int(math.isinf(p))))
        rows.append(("ssim", repr(ssim(u, ds.u_gt))))
        epe = endpoint_errors([d.displacement for d in defs], ds.v_gt)
        rows.append(("epe_mean_px", repr(float(epe.mean()))))
        rows.append(("epe_max_px", repr(float(epe.max()))))
        rows.extend((f"epe_frame_{t}", repr(float(e))) for t, e in enumerate(epe))
        rows.append(("ground_truth", 1))
    else:
        rows.append(("ground_truth", 0))
    rows.append(("diff_uncorrected_mean", repr(float(unc.mean()))))
    rows.append(("diff_corrected_mean", repr(float(cor.mean()))))

    lo = min(unc.min(), cor.min())
    hi = max(unc.max(), cor.max())
    write_pgm(os.path.join(cfg.out, "diffmap_uncorrected.pgm"), unc, lo, hi)
    write_pgm(os.path.join(cfg.out, "diffmap_corrected.pgm"), cor, lo, hi)
    for t, d in enumerate(defs):
        det = d.det()
        inv = invert_deformation(d, max_iter=500, tol_px=1e-6)
        rows.append((f"min_det_{t}", repr(float(det.min()))))
        write_pgm(os.path.join(cfg.out, f"det_{t}.pgm"), det)
        write_pgm(os.path.join(cfg.out, f"detinv_{t}.pgm"), det_inverse_jacobian(d, inv))
    counts = manifest.get("regrid_counts", "").split()
    rows.extend((f"regrid_count_{t}", c) for t, c in enumerate(counts))
    energy_path = os.path.join(cfg.out, "energy.csv")
    if os.path.exists(energy_path):
        with open(energy_path, encoding="utf-8") as fh:
            last = list(csv.DictReader(fh))
        if last:
            rows.append(("energy_final", last[-1]["total"]))
            rows.append(("sweeps", len(last)))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerows(rows)
    with open(os.path.join(cfg.out, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    for k, v in rows:
        if k in ("psnr_db", "ssim", "epe_mean_px", "diff_uncorrected_mean", "diff_corrected_mean"):
            print(f"{k}: {v}")
    return dict(rows)


# ---------------------------------------------------------------------------
# entry point


def _split_overrides(extra):
    overrides = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"unrecognised argument {arg!r}; use --key=value")
        k, v = arg[2:].split("=", 1)
        overrides[k.replace("-", "_")] = v
    return overrides


def build_parser():
    ap = argparse.ArgumentParser(prog="vmtrecon", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=("simulate", "reconstruct", "evaluate"))
    ap.add_argument("--config", help="key=value configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, _split_overrides(extra))
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg)
        else:
            cmd_evaluate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

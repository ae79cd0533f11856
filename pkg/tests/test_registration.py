import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmtrecon import grid
from vmtrecon.registration import (
    Deformation,
    OgdenParams,
    RegridState,
    compose_deformations,
    det_inverse_jacobian,
    displacement_gradient,
    invert_deformation,
    multiscale_register,
    ogden_density,
    ogden_energy,
    ogden_gradient,
    pin_boundary,
    pyramid_levels,
    regrid_step,
    register,
    screened_poisson_solve,
    update_phi,
    update_z,
    z_energy_density,
    z_step,
)

P = OgdenParams(1.0, 50.0)


def identity_matrix_field(shape):
    F = np.zeros((2, 2) + shape)
    F[0, 0] = F[1, 1] = 1.0
    return F


def smooth_field(shape, amp, seed=0):
    """Smooth displacement vanishing on the boundary."""
    ny, nx = shape
    rng = np.random.default_rng(seed)
    y = np.arange(ny)[:, None] / (ny - 1)
    x = np.arange(nx)[None, :] / (nx - 1)
    v = np.zeros((2, ny, nx))
    for c in range(2):
        a, b = rng.uniform(0, 2 * np.pi, 2)
        v[c] = amp * np.sin(np.pi * y) * np.sin(np.pi * x) * np.sin(2 * np.pi * y + a) * np.cos(2 * np.pi * x + b)
    return v


# ---------------------------------------------------------------------------
# stored energy


def test_ogden_identity_anchor():
    n = 37 * 23
    assert ogden_energy(identity_matrix_field((37, 23)), P) == 4.0 * P.a1 * n


def test_ogden_fold_is_infinite():
    F = identity_matrix_field((3, 3))
    F[0, 0, 1, 1] = -0.5
    assert np.isinf(ogden_energy(F, P))
    assert np.isinf(ogden_density(F, P)[1, 1])


def test_ogden_area_preserving_stretch():
    F = np.zeros((2, 2, 1, 1))
    F[0, 0], F[1, 1] = 2.0, 0.5
    assert ogden_energy(F, P) == pytest.approx(P.a1 * 4.25 ** 2, rel=1e-15)


def test_ogden_params_validation():
    with pytest.raises(ValueError):
        OgdenParams(0.0, 1.0)


def _fd_gradient(z, grad_v, p, gamma1, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        g[idx] = (z_energy_density(zp, grad_v, p, gamma1).sum() - z_energy_density(zm, grad_v, p, gamma1).sum()) / (2 * eps)
    return g


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ogden_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-0.3, 0.3, (2, 2, 3, 3))
    assert grid.determinant(z + identity_matrix_field((3, 3))).min() > 0.3
    gv = rng.uniform(-0.3, 0.3, z.shape)
    analytic = ogden_gradient(z, P) + 5.0 * (z - gv)
    fd = _fd_gradient(z, gv, P, 5.0)
    assert np.linalg.norm(analytic - fd) <= 1e-5 * np.linalg.norm(fd)


def test_update_z_hand_value():
    z = update_z(np.zeros((2, 2, 4, 4)), np.zeros((2, 4, 4)), OgdenParams(1.0, 50.0), 5.0, 1e-3)
    np.testing.assert_allclose(z[0, 0], 1e-3 * -8.0 / (1 + 1e-3 * 5.0))
    assert z[0, 0, 0, 0] == pytest.approx(-7.960e-3, abs=5e-7)
    np.testing.assert_allclose(z[0, 1], 0.0)


def test_update_z_symmetric_offdiagonals():
    ny = nx = 6
    r, c = np.mgrid[0:ny, 0:nx].astype(float)
    # d(v_y)/dx == d(v_x)/dy == 0.02, diagonal entries vary
    v = np.stack([0.02 * c + 0.01 * r ** 2, 0.02 * r + 0.01 * c ** 2])
    gv = displacement_gradient(v)
    sl = (slice(0, -1), slice(0, -1))
    np.testing.assert_allclose(gv[0, 1][sl], gv[1, 0][sl])
    z = gv.copy()
    out = update_z(z, v, P, 5.0, 1e-3)
    np.testing.assert_allclose(out[0, 1][sl], out[1, 0][sl], rtol=1e-12, atol=1e-15)


def test_update_z_stationary_when_energy_gradient_vanishes():
    # vanishing stored-energy coefficients make z = grad v stationary
    p = OgdenParams(1e-300, 1e-300)
    v = smooth_field((6, 6), 0.2, seed=2)
    gv = displacement_gradient(v)
    np.testing.assert_allclose(update_z(gv.copy(), v, p, 5.0, 1e-3), gv, atol=1e-15)
    zs, _ = z_step(gv.copy(), gv, p, 5.0, 1e-3)
    np.testing.assert_allclose(zs, gv, atol=1e-15)


def test_z_step_monotone(rng):
    gv = rng.uniform(-0.5, 0.5, (2, 2, 8, 8))
    z = np.zeros_like(gv)
    e = z_energy_density(z, gv, P, 5.0)
    for _ in range(20):
        z, _ = z_step(z, gv, P, 5.0, 0.05)
        e_new = z_energy_density(z, gv, P, 5.0)
        assert np.all(e_new <= e + 1e-12)
        e = e_new


def test_update_z_rejects_fold():
    z = np.zeros((2, 2, 2, 2))
    z[0, 0] = -2.0
    with pytest.raises(FloatingPointError):
        update_z(z, np.zeros((2, 2, 2)), P, 5.0, 1e-3)


# ---------------------------------------------------------------------------
# phi step


def test_screened_poisson_dense_oracle(rng):
    ny, nx = 7, 6
    rhs = rng.standard_normal((ny, nx))
    c = 0.8
    w = screened_poisson_solve(rhs, c)
    assert not w[0].any() and not w[-1].any() and not w[:, 0].any() and not w[:, -1].any()
    lap = np.zeros_like(w)
    lap[1:-1, 1:-1] = (w[2:, 1:-1] + w[:-2, 1:-1] + w[1:-1, 2:] + w[1:-1, :-2] - 4 * w[1:-1, 1:-1])
    np.testing.assert_allclose((w - c * lap)[1:-1, 1:-1], rhs[1:-1, 1:-1], atol=1e-12)


def test_update_phi_stationary():
    h = np.random.default_rng(0).standard_normal((10, 10))
    phi = update_phi(Deformation.identity((10, 10)), np.zeros((2, 2, 10, 10)), h, h, 5.0, 1.0, 0.5)
    assert not phi.displacement.any()
    c = np.full((10, 10), 0.4)
    phi = update_phi(Deformation.identity((10, 10)), np.zeros((2, 2, 10, 10)), c, c, 5.0, 100.0, 0.5)
    assert not phi.displacement.any()


def test_update_phi_pure_diffusion_decreases_norm():
    v = smooth_field((16, 16), 2.0, seed=3)
    pin_boundary(v)
    phi = Deformation(v)
    h = np.zeros((16, 16))
    norms = [np.linalg.norm(v)]
    for _ in range(5):
        phi = update_phi(phi, np.zeros((2, 2, 16, 16)), h, h, 5.0, 0.0, 0.5)
        norms.append(np.linalg.norm(phi.displacement))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_matching_force_reduces_mismatch():
    n = 32
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    tmpl = np.exp(-((yy - 16) ** 2 + (xx - 16) ** 2) / 40.0)
    mov = np.exp(-((yy - 16) ** 2 + (xx - 17) ** 2) / 40.0)
    phi = Deformation.identity((n, n))
    before = np.sum((grid.warp(mov, phi) - tmpl) ** 2)
    phi = update_phi(phi, np.zeros((2, 2, n, n)), mov, tmpl, 0.1, 1.0, 0.5)
    assert np.sum((grid.warp(mov, phi) - tmpl) ** 2) < before


# ---------------------------------------------------------------------------
# inverse / composition / Jacobians


def test_invert_identity_and_translation():
    assert not invert_deformation(Deformation.identity((8, 8))).displacement.any()
    v = np.zeros((2, 16, 16))
    v[0], v[1] = 1.5, -2.0
    inv = invert_deformation(Deformation(v))
    np.testing.assert_allclose(inv.displacement[0][4:-4, 4:-4], -1.5, atol=1e-12)
    np.testing.assert_allclose(inv.displacement[1][4:-4, 4:-4], 2.0, atol=1e-12)


def test_invert_sinusoid_64():
    n = 64
    y, x = np.mgrid[0:n, 0:n] / (n - 1)
    v = np.stack([2.0 * np.sin(2 * np.pi * x) * np.sin(np.pi * y), 2.0 * np.sin(2 * np.pi * y) * np.sin(np.pi * x)])
    phi = Deformation(v)
    inv = invert_deformation(phi)
    both = compose_deformations(phi, inv)
    assert np.abs(both.displacement).max() <= 0.1


def test_invert_large_gradient_swirl():
    # |grad v| > 1 at the centre, so the plain fixed point does not contract
    n = 48
    c = grid.identity_coords((n, n)) - (n - 1) / 2
    ang = 1.6 * np.exp(-(c[0] ** 2 + c[1] ** 2) / (2 * 6.0 ** 2))
    rot = np.stack([np.cos(ang) * c[0] - np.sin(ang) * c[1], np.sin(ang) * c[0] + np.cos(ang) * c[1]])
    phi = Deformation(rot - c)
    assert np.abs(np.gradient(phi.displacement[0])[1]).max() > 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        inv = invert_deformation(phi, max_iter=200, tol_px=1e-8)
    both = compose_deformations(phi, inv)
    assert np.abs(both.displacement[:, 4:-4, 4:-4]).max() <= 1e-6


def test_invert_warns_when_not_converged():
    v = smooth_field((16, 16), 3.0)
    with pytest.warns(RuntimeWarning):
        _, change = invert_deformation(Deformation(v), max_iter=1, tol_px=1e-12, return_residual=True)


def test_compose_identities_and_translations(rng):
    b = Deformation(smooth_field((12, 12), 1.0, seed=4))
    idm = Deformation.identity((12, 12))
    np.testing.assert_array_equal(compose_deformations(idm, b).displacement, b.displacement)
    np.testing.assert_array_equal(compose_deformations(b, idm).displacement, b.displacement)
    t1 = Deformation(np.full((2, 12, 12), 0.5))
    t2 = Deformation(np.full((2, 12, 12), 1.25))
    np.testing.assert_allclose(compose_deformations(t1, t2).displacement[:, :8, :8], 1.75)


def test_compose_associative():
    a, b, c = (Deformation(smooth_field((64, 64), 0.8, seed=s)) for s in (1, 2, 3))
    left = compose_deformations(compose_deformations(a, b), c)
    right = compose_deformations(a, compose_deformations(b, c))
    assert np.abs(left.displacement - right.displacement).max() <= 1e-2


def test_det_inverse_jacobian_identity_and_scaling():
    idm = Deformation.identity((8, 8))
    np.testing.assert_array_equal(det_inverse_jacobian(idm, idm), 1.0)
    s = 0.9
    c = grid.identity_coords((20, 20))
    phi = Deformation((s - 1.0) * c)
    inv = Deformation((1.0 / s - 1.0) * c)
    d = det_inverse_jacobian(phi, inv)
    np.testing.assert_allclose(d[2:-4, 2:-4], 1.0 / s ** 2, rtol=1e-12)


def test_det_inverse_jacobian_consistency():
    phi = Deformation(smooth_field((64, 64), 2.0, seed=5))
    inv = invert_deformation(phi, max_iter=200, tol_px=1e-10)
    direct = inv.det()
    formula = det_inverse_jacobian(phi, inv)
    sl = (slice(4, -4), slice(4, -4))
    assert np.max(np.abs(direct[sl] - formula[sl]) / formula[sl]) <= 0.05


def test_det_inverse_jacobian_rejects_fold():
    v = np.zeros((2, 4, 4))
    v[1, 1, 2] = -3.0
    with pytest.raises(FloatingPointError):
        det_inverse_jacobian(Deformation(v), Deformation.identity((4, 4)))


# ---------------------------------------------------------------------------
# regridding


def test_regrid_not_triggered():
    st = RegridState(tol=0.05)
    phi = Deformation(smooth_field((16, 16), 0.5))
    out, z, h, st = regrid_step(st, phi, np.ones((2, 2, 16, 16)), np.ones((16, 16)))
    assert st.regrid_count == 0 and out is phi and z.any()


def test_regrid_pinched_pixel():
    tol = 0.05
    v = np.zeros((2, 10, 10))
    v[1, 4, 5] = tol / 2 - 1.0
    phi = Deformation(v)
    assert phi.det()[4, 4] == pytest.approx(tol / 2)
    st = RegridState(tol=tol)
    h = np.arange(100.0).reshape(10, 10)
    out, z, h2, st = regrid_step(st, phi, np.ones((2, 2, 10, 10)), h)
    assert st.regrid_count == 1
    assert not out.displacement.any() and not z.any()
    np.testing.assert_allclose(h2, grid.warp(h, phi))
    assert len(st.saved_maps) == 1


def test_regrid_composition_matches_cumulative_warp():
    maps = [Deformation(smooth_field((48, 48), 1.5, seed=s)) for s in range(3)]
    st = RegridState(tol=0.05, saved_maps=maps[:2], regrid_count=2)
    total = st.composed(maps[2])
    # track points through the chain: total(x) = m0(m1(m2(x)))
    pts = grid.identity_coords((48, 48))
    for m in reversed(maps):
        pts = pts + np.stack([grid.sample(m.displacement[c], pts) for c in range(2)])
    assert np.abs(total.targets() - pts).max() <= 0.2
    assert RegridState().composed() is None


# ---------------------------------------------------------------------------
# registration drivers


def _blobs(shift):
    n = 64
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    blob = lambda cy, cx: np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 7.0 ** 2))
    return blob(32, 32), blob(32, 32 + shift)


def test_register_identical_inputs_stays_identity():
    tmpl, _ = _blobs(0)
    phi, info = register(tmpl, tmpl, P, 5.0, 100.0, 20)
    assert np.abs(phi.displacement).max() < 1e-12


def test_register_energy_monotone():
    tmpl, mov = _blobs(3)
    _, info = register(tmpl, mov, P, 5.0, 100.0, 60)
    e = np.array(info["energy"])
    assert np.all(np.diff(e) <= 1e-10 * np.abs(e[:-1]))


def test_register_stiff_force_regrids_and_keeps_topology():
    tmpl, mov = _blobs(6)
    phi, info = register(tmpl, mov, P, 5.0, 1000.0, 50)
    assert info["regrid_count"] >= 1
    assert info["min_det"] > 0


def test_multiscale_single_level_is_plain_solve():
    tmpl, mov = _blobs(3)
    calls = []

    def driver(ims, init):
        calls.append(init)
        return register(ims[0], ims[1], P, 5.0, 100.0, 30, init=init)[0]

    phi = multiscale_register(driver, (tmpl, mov), 1)
    assert calls == [None]
    np.testing.assert_array_equal(phi.displacement, register(tmpl, mov, P, 5.0, 100.0, 30)[0].displacement)


def test_multiscale_identical_inputs():
    tmpl, _ = _blobs(0)
    seen = []

    def driver(ims, init):
        phi = register(ims[0], ims[1], P, 5.0, 100.0, 20, init=init)[0]
        seen.append(np.abs(phi.displacement).max())
        return phi

    multiscale_register(driver, (tmpl, tmpl), 2)
    assert len(seen) == 2 and max(seen) < 1e-12


def test_multiscale_recovers_translation_better_than_single_level():
    tmpl, mov = _blobs(6)
    core = tmpl > 0.5

    def epe(phi):
        return np.sqrt((phi.displacement[1] - 6.0) ** 2 + phi.displacement[0] ** 2)[core].mean()

    def driver(iters):
        return lambda ims, init: register(ims[0], ims[1], P, 5.0, 100.0, iters, init=init)[0]

    # the coarse level costs a quarter of a fine iteration, so 200 + 200/4 < 300
    two = epe(multiscale_register(driver(200), (tmpl, mov), 2))
    one = epe(multiscale_register(driver(300), (tmpl, mov), 1))
    assert two < 1.0
    assert two < one


def test_pyramid_levels():
    assert pyramid_levels((64, 64), 2) == 2
    assert pyramid_levels((64, 64), 1) == 1
    with pytest.warns(RuntimeWarning):
        assert pyramid_levels((10, 10), 3) == 1

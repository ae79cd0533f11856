import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vmtrecon import JointReconstructor, SequentialReconstructor, SolverParams
from vmtrecon.estimators import check_factor, check_kspace, check_masks
from vmtrecon.phantom import make_default_dataset

FAST = dict(gamma2=100.0, gamma3=300.0, alpha=0.2, outer_iters=4, levels_k=1)


@pytest.fixture(scope="module")
def ds():
    return make_default_dataset(2.0, T=2, hr_shape=(32, 32), amplitude=1.0, seed=1)


def test_get_params_and_clone():
    est = JointReconstructor(gamma2=7.0, h_mode="diagonal")
    p = est.get_params()
    assert p["gamma2"] == 7.0 and p["h_mode"] == "diagonal" and p["a1"] == 1.0
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(alpha=0.3)
    assert est.alpha == 0.3


def test_solver_params_round_trip():
    params = JointReconstructor(theta=2.0).solver_params()
    assert isinstance(params, SolverParams) and params.theta == 2.0


def test_invalid_params_raise_at_fit(ds):
    with pytest.raises(ValueError):
        JointReconstructor(gamma1=-1.0).fit(ds)
    with pytest.raises(ValueError):
        JointReconstructor(h_mode="exact", **FAST).fit(ds)


def test_fit_on_dataset(ds):
    est = JointReconstructor(**FAST).fit(ds)
    assert est.u_.shape == (32, 32) and est.n_frames_ == 2
    assert len(est.deformations_) == 2 and len(est.energy_trace_) == 4
    assert est.transform(ds) is est.u_ and est.predict(ds) is est.u_
    assert est.forward().shape == (16, 16)


def test_fit_on_kspace_stack_matches_dataset(ds):
    a = JointReconstructor(**FAST).fit(ds)
    b = JointReconstructor(**FAST).fit(ds.kspace, masks=ds.masks)
    np.testing.assert_array_equal(a.u_, b.u_)


def test_sequential_estimator(ds):
    est = SequentialReconstructor(**FAST).fit(ds)
    assert est.u_.shape == (32, 32)
    assert np.all(est.deformations_[0].displacement == 0)
    assert est.energy_trace_.size == 0


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        JointReconstructor().transform(None)


def test_check_kspace():
    with pytest.raises(ValueError):
        check_kspace(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_kspace(np.zeros((0, 4, 4)))
    bad = np.zeros((1, 4, 4), complex)
    bad[0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        check_kspace(bad)
    assert check_kspace(np.ones((2, 4, 4))).dtype == complex


def test_check_masks():
    shape = (2, 4, 4)
    assert check_masks(None, shape).all()
    m = check_masks(np.eye(4), shape)
    assert m.shape == shape and m.dtype == bool
    with pytest.raises(ValueError):
        check_masks(np.ones((3, 4, 4), bool), shape)
    with pytest.raises(ValueError):
        check_masks(np.full((4, 4), 0.5), shape)


def test_check_factor():
    assert check_factor(2.0, (8, 8)) == 2
    with pytest.raises(ValueError):
        check_factor(0, (8, 8))

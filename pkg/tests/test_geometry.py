import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hyperpose import tensor as T
from hyperpose.geometry import (DegenerateRotationError, LossParams, RotationRepr, angular_error_deg, frobenius,
                                median_errors, orientation_loss_quat, pose_loss, position_loss, quat_from_axis_angle,
                                quat_mul_np, quat_to_rotmat, quat_to_rotmat_np, raw_to_quat_np, rotation_loss,
                                rotmat_to_quat_np, sixd_to_quat_np, sixd_to_rotmat)
from hyperpose.gradcheck import gradcheck
from hyperpose.tensor import Tensor

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def unit_quats(n, seed=0):
    q = np.random.default_rng(seed).normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def val(t):
    return float(np.asarray(t.data))


def test_position_loss_examples():
    assert val(position_loss(Tensor([0.0, 0, 0]), [0.0, 0, 0])) == 0.0
    assert val(position_loss(Tensor([0.0, 0, 0]), [3.0, 4, 0])) == pytest.approx(5.0)


def test_position_loss_gradient_is_unit_direction():
    x = Tensor(np.array([1.0, 2.0, 2.0]), requires_grad=True)
    position_loss(x, [0.0, 0.0, 0.0]).backward()
    assert np.allclose(x.grad, [1 / 3, 2 / 3, 2 / 3])


def test_quaternion_loss_examples():
    assert val(orientation_loss_quat(Tensor([2.0, 0, 0, 0]), IDENT)) == pytest.approx(0.0, abs=1e-7)
    assert val(orientation_loss_quat(Tensor([0.0, 0, 0, 1]), IDENT)) == pytest.approx(math.sqrt(2), abs=1e-6)
    assert val(orientation_loss_quat(Tensor(-IDENT), IDENT)) == pytest.approx(2.0)


def test_quaternion_loss_zero_norm_raises():
    with pytest.raises(DegenerateRotationError):
        orientation_loss_quat(Tensor(np.zeros(4)), IDENT)


def test_pose_loss_examples():
    assert val(pose_loss(Tensor(1.0), Tensor(1.0), LossParams())) == pytest.approx(2.0)
    got = val(pose_loss(Tensor(2.0), Tensor(4.0), LossParams(math.log(2), math.log(4))))
    assert got == pytest.approx(4.0794, abs=1e-4)


def test_pose_loss_s_gradient_matches_formula():
    with T.precision(np.float64):
        params = LossParams(0.3, -0.2)
        lx, lq = Tensor(1.7), Tensor(0.4)
        pose_loss(lx, lq, params).backward()
        assert params.s_x.grad[0] == pytest.approx(-1.7 * math.exp(-0.3) + 1)
        assert params.s_q.grad[0] == pytest.approx(-0.4 * math.exp(0.2) + 1)
        params = LossParams(0.3, -0.2)
        rep = gradcheck(lambda: pose_loss(lx, lq, params), [params.s_x, params.s_q], tol=1e-7)
    assert rep.passed


def test_rotation_loss_examples():
    assert val(rotation_loss("6d", Tensor([1.0, 0, 0, 0, 1, 0]), IDENT)) == pytest.approx(0.0, abs=1e-7)
    q = unit_quats(1, 3)[0]
    assert val(rotation_loss(RotationRepr.FOUR_D_NORM, Tensor(-q), q)) == pytest.approx(0.0, abs=1e-6)
    assert val(rotation_loss("quaternion", Tensor(-q), q)) == pytest.approx(2.0, abs=1e-6)


def test_rotation_loss_width_checked():
    with pytest.raises(T.ShapeError):
        rotation_loss("6d", Tensor(np.zeros(4)), IDENT)


def test_sixd_degenerate_raises():
    with pytest.raises(DegenerateRotationError):
        sixd_to_rotmat(Tensor([1.0, 0, 0, 2.0, 0, 0]))
    with pytest.raises(DegenerateRotationError):
        sixd_to_rotmat(Tensor([0.0, 0, 0, 0, 1, 0]))


def test_rotation_matrices_are_orthonormal():
    qs = unit_quats(1000, 1)
    r = quat_to_rotmat_np(qs)
    eye = np.broadcast_to(np.eye(3), r.shape)
    assert np.abs(np.einsum("nji,njk->nik", r, r) - eye).max() < 1e-6
    assert np.abs(np.linalg.det(r) - 1.0).max() < 1e-6
    rt = quat_to_rotmat(Tensor(qs[:10], dtype=np.float64)).data
    assert np.allclose(rt, r[:10])


def test_sixd_matrix_is_rotation(rng):
    raw = rng.normal(size=(20, 6))
    r = sixd_to_rotmat(Tensor(raw, dtype=np.float64)).data
    assert np.allclose(np.einsum("nji,njk->nik", r, r), np.eye(3), atol=1e-9)
    assert np.allclose(np.linalg.det(r), 1.0)
    assert np.allclose(r[:, :, 0], raw[:, :3] / np.linalg.norm(raw[:, :3], axis=1, keepdims=True))


def test_rotmat_quat_round_trip():
    qs = unit_quats(200, 4)
    back = rotmat_to_quat_np(quat_to_rotmat_np(qs))
    assert np.all(back[:, 0] >= 0)
    assert np.allclose(np.abs((back * qs).sum(1)), 1.0, atol=1e-9)
    sixd = np.concatenate([quat_to_rotmat_np(qs)[:, :, 0], quat_to_rotmat_np(qs)[:, :, 1]], axis=1)
    assert np.allclose(angular_error_deg(sixd_to_quat_np(sixd), qs), 0.0, atol=1e-5)
    assert np.allclose(angular_error_deg(raw_to_quat_np("4dnorm", 3 * qs), qs), 0.0, atol=1e-5)


def test_angular_error_examples():
    q = unit_quats(1, 7)[0]
    assert angular_error_deg(q, q) == pytest.approx(0.0, abs=1e-5)
    assert angular_error_deg(-q, q) == pytest.approx(0.0, abs=1e-5)
    c = math.cos(math.pi / 4)
    assert angular_error_deg([c, c, 0, 0], IDENT) == pytest.approx(90.0)
    assert angular_error_deg(quat_from_axis_angle([0, 0, 1], math.radians(30)), IDENT) == pytest.approx(30.0)


def test_median_errors():
    assert median_errors([(1, 10), (2, 20), (3, 30), (4, 40)]) == (2.5, 25.0)
    with pytest.raises(ValueError):
        median_errors([])


def test_frobenius_of_identical_is_zero():
    r = quat_to_rotmat(Tensor(unit_quats(2, 2), dtype=np.float64))
    assert np.allclose(frobenius(r, r).data, 0.0)


def test_losses_nonnegative_and_zero_at_target(rng):
    qs = unit_quats(5, 9)
    for repr_, raw in (("quaternion", qs), ("4dnorm", qs),
                       ("6d", np.concatenate([quat_to_rotmat_np(qs)[:, :, 0], quat_to_rotmat_np(qs)[:, :, 1]], 1))):
        assert np.allclose(rotation_loss(repr_, Tensor(raw, dtype=np.float64), qs).data, 0.0, atol=1e-7)
        other = rotation_loss(repr_, Tensor(raw, dtype=np.float64), unit_quats(5, 10)).data
        assert np.all(other >= 0) and np.all(other > 1e-3)


def test_quat_mul_matches_matrix_product():
    a, b = unit_quats(2, 11)
    assert np.allclose(quat_to_rotmat_np(quat_mul_np(a, b)), quat_to_rotmat_np(a) @ quat_to_rotmat_np(b))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4,), elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-2),
       st.floats(0.01, 100).flatmap(lambda s: st.sampled_from([s, -s])))
def test_angular_error_scale_invariant(q, s):
    assert angular_error_deg(s * q, q) == pytest.approx(0.0, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_pose_loss_reduces_to_sum_at_zero_s(lx, lq):
    with T.precision(np.float64):
        assert val(pose_loss(Tensor(lx), Tensor(lq), LossParams())) == pytest.approx(lx + lq)

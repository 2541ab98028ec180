import warnings

import numpy as np
import pytest

from scenecomp import geomath as gm
from scenecomp import losses as L
from scenecomp import numerics as nx
from scenecomp.geomath import Pose8

IDENT = np.array([0, 0, 0, 1, 0, 0, 0, 1.0])


def box_occ(res=16, lo=4, hi=12):
    occ = np.zeros((res,) * 3, bool)
    occ[lo:hi, lo:hi, lo:hi] = True
    return occ


def pose_vec(t, s=1.0):
    return np.array([*t, 1, 0, 0, 0, s], dtype=float)


# -- flow matching -----------------------------------------------------------

def test_cfm_exact_target_is_zero():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    assert L.cfm_loss(eps - x0, x0, eps).item() == 0.0


def test_cfm_unit_error_is_one():
    x0 = np.zeros((5, 5))
    eps = np.ones((5, 5))
    assert L.cfm_loss(np.zeros((5, 5)), x0, eps).item() == pytest.approx(1.0)


def test_cfm_two_assets_is_mean_of_singles():
    rng = np.random.default_rng(1)
    v = [rng.normal(size=(4, 4)), rng.normal(size=(2, 3))]
    x = [rng.normal(size=(4, 4)), rng.normal(size=(2, 3))]
    e = [rng.normal(size=(4, 4)), rng.normal(size=(2, 3))]
    singles = [np.mean((vi - (ei - xi)) ** 2) for vi, xi, ei in zip(v, x, e)]
    assert L.cfm_loss(v, x, e).item() == pytest.approx(np.mean(singles), abs=1e-12)


def test_cfm_rejects_mismatch():
    with pytest.raises(ValueError):
        L.cfm_loss([np.zeros(2)], [np.zeros(2)] * 2, [np.zeros(2)])
    with pytest.raises(ValueError):
        L.cfm_loss(np.zeros(3), np.zeros(4), np.zeros(4))


# -- huber -------------------------------------------------------------------

def test_huber_examples():
    d = 0.02
    assert L.huber(np.zeros(4), d).item() == 0.0
    assert L.huber(np.array([d]), d).item() == pytest.approx(0.5 * d, abs=1e-15)
    assert L.huber(np.array([2 * d]), d).item() == pytest.approx(1.5 * d, abs=1e-15)
    assert L.huber(np.array([-2 * d, 2 * d]), d).item() == pytest.approx(3 * d, abs=1e-15)
    with pytest.raises(ValueError):
        L.huber(np.zeros(1), 0.0)


def test_huber_gradient_continuous_at_threshold():
    d = 0.05
    for e in (d - 1e-9, d + 1e-9):
        x = nx.Tensor(np.array([e]), requires_grad=True)
        nx.backward(L.huber(x, d))
        assert x.grad[0] == pytest.approx(1.0, abs=1e-6)


# -- position ----------------------------------------------------------------

def test_position_exact_is_zero():
    gt = [Pose8(np.array([0.3, -0.1, 0.2]), gm.quat_from_axis_angle([0, 0, 1], 0.7), 0.8)]
    assert L.position_loss(gt, gt, 2.0).item() == 0.0


def test_position_translation_normalized_by_scene_size():
    gt = pose_vec([0, 0, 0])[None]
    pred = pose_vec([0.5, 0, 0])[None]
    a = L.position_loss(pred, gt, 1.0).item()
    b = L.position_loss(pred, gt, 2.0).item()
    assert b < a
    # closed form: |0.5/d| - delta/2
    assert a == pytest.approx(0.5 - 0.01, abs=1e-12)


def test_position_antipodal_quaternion_is_free():
    q = gm.quat_from_axis_angle([1, 2, 3], 1.1)
    gt = np.r_[0, 0, 0, q, 1.0][None]
    pred = np.r_[0, 0, 0, -q, 1.0][None]
    assert L.position_loss(pred, gt, 1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_position_joint_sign_flip_invariant():
    rng = np.random.default_rng(2)
    qp, qg = gm.quat_normalize(rng.normal(size=4)), gm.quat_normalize(rng.normal(size=4))
    pred = np.r_[0.1, 0.2, 0.0, qp, 0.9][None]
    gt = np.r_[0.0, 0.1, 0.3, qg, 1.1][None]
    a = L.position_loss(pred, gt, 1.5).item()
    pred[0, 3:7] *= -1
    gt[0, 3:7] *= -1
    assert L.position_loss(pred, gt, 1.5).item() == pytest.approx(a, abs=1e-15)


def test_position_batched_averages_scenes():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(3, 2, 8))
    gt = rng.normal(size=(3, 2, 8))
    d = np.array([1.0, 2.0, 3.0])
    per = [L.position_loss(pred[i], gt[i], d[i]).item() for i in range(3)]
    assert L.position_loss(pred, gt, d).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_position_empty_and_bad_scale():
    assert L.position_loss([], [], 1.0).item() == 0.0
    with pytest.raises(ValueError):
        L.position_loss(IDENT[None], IDENT[None], 0.0)


# -- hard collision ----------------------------------------------------------

def test_hard_collision_examples():
    pts = gm.surface_points(box_occ())
    assert L.collision_loss([pts - 0.6 * np.array([1, 0, 0]) * 2, pts + np.array([1.2, 0, 0])], 3.0) == 0.0
    assert L.collision_loss([pts, pts.copy()], 2.0) == pytest.approx(1 - 0.5 * 0.05, abs=1e-12)
    assert L.collision_loss([pts], 2.0) == 0.0


# -- soft collision ----------------------------------------------------------

def soft_probs(occ, sharpness):
    logits = np.where(occ, 1.0, -1.0) * sharpness
    return nx.Tensor(1.0 / (1.0 + np.exp(-logits)))


@pytest.mark.parametrize("sharpness", [2.0, 4.0, 8.0, 16.0, 32.0])
def test_soft_matches_hard_on_separated_clouds(sharpness):
    occ = box_occ()
    d = 3.0
    poses = [pose_vec([-1.4, 0, 0], 0.5), pose_vec([1.4, 0, 0], 0.5)]
    hard = L.collision_loss([gm.apply_pose(gm.surface_points(occ), Pose8.from_vector(p)) for p in poses], d)
    soft = L.collision_loss_soft([soft_probs(occ, sharpness)] * 2, [nx.Tensor(p) for p in poses], d)
    assert abs(soft.item() - hard) < 1e-3


def test_soft_overlap_tracks_hard_when_coincident():
    occ = box_occ()
    probs = [soft_probs(occ, 30.0)] * 2
    iou = L.soft_scene_iou(probs, [nx.Tensor(IDENT)] * 2, 2.0).item()
    hard = L.scene_iou_hard([gm.surface_points(occ)] * 2, 2.0)
    assert hard == 1.0 and iou > 0.8


def test_soft_single_asset_zero():
    assert L.soft_scene_iou([soft_probs(box_occ(), 10.0)], [nx.Tensor(IDENT)], 2.0).item() == 0.0


def translation_grad(offset):
    occ = box_occ()
    d = 3.0
    p0 = nx.Tensor(pose_vec([0, 0, 0], 0.5))
    p1 = nx.Tensor(pose_vec([offset, 0.01, 0.02], 0.5), requires_grad=True)
    loss = L.collision_loss_soft([soft_probs(occ, 10.0)] * 2, [p0, p1], d)
    nx.backward(loss)
    return loss.item(), p1.grad[:3]


def test_soft_gradient_nonzero_when_overlapping():
    val, g = translation_grad(0.2)
    assert val > 0 and np.linalg.norm(g) > 1e-6


def test_soft_gradient_zero_when_separated_by_two_cells():
    cell = 2 * 3.0 / 64
    # each box spans [-0.25, 0.25] after scaling, so bounding boxes are two cells apart
    val, g = translation_grad(0.5 + 2 * cell + 1e-3)
    assert val == 0.0 and np.all(g == 0.0)


def test_quat_matrix_matches_numpy():
    q = gm.quat_normalize(np.random.default_rng(4).normal(size=4))
    assert np.allclose(L.quat_to_matrix_t(nx.Tensor(q)).data, gm.quat_to_matrix(q), atol=1e-14)


def test_soft_surface_interior_suppressed():
    p = nx.Tensor(box_occ(8, 2, 6).astype(float))
    s = L.soft_surface(p).data
    assert np.array_equal(s > 0.5, gm.surface_mask(box_occ(8, 2, 6)))


# -- combination -------------------------------------------------------------

def test_lambda_schedule():
    assert L.lambda_schedule(0) == 1.0
    assert L.lambda_schedule(10_000) == 0.2
    assert L.lambda_schedule(69) == pytest.approx(0.99 ** 69, abs=1e-15)
    assert abs(L.lambda_schedule(69) - 0.4998) < 1e-4


def test_combine_identity_and_clamp():
    total, br = L.combine(1.5, 0.25, 0.5, 0.4)
    assert abs(br.total - (br.cfm + br.lam * (br.pos + br.coll))) < 1e-9
    assert total.item() == br.total
    assert set(br.to_dict()) == {"cfm", "pos", "coll", "total", "lambda"}
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        _, br = L.combine(1.0, 1.0, 1.0, 3.0)
    assert br.lam == 1.0 and w

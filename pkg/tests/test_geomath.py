import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenecomp import geomath as gm
from scenecomp.geomath import Pose8


def random_pose(rng, scale=True):
    q = gm.quat_normalize(rng.normal(size=4))
    return Pose8(rng.normal(size=3), q, rng.uniform(0.3, 3.0) if scale else 1.0)


def test_identity_pose_leaves_cloud():
    pc = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(gm.apply_pose(pc, Pose8.identity()), pc)


def test_apply_pose_hand_value():
    out = gm.apply_pose([[1.0, 1.0, 1.0]], Pose8([1, 0, 0], [1, 0, 0, 0], 2.0))
    assert np.allclose(out, [[3.0, 2.0, 2.0]])


def test_apply_inverse_recovers_cloud():
    rng = np.random.default_rng(1)
    pc = rng.normal(size=(50, 3))
    P = random_pose(rng)
    back = gm.apply_pose(gm.apply_pose(pc, P), P.inverse())
    # oracle: analytic inverse s^-1 R^T (p - t)
    manual = (gm.apply_pose(pc, P) - P.t) @ P.R / P.s
    assert np.allclose(back, pc, atol=1e-9)
    assert np.allclose(manual, pc, atol=1e-9)


def test_pose_normalizes_quaternion_and_rejects_bad_scale():
    assert np.allclose(Pose8(q=[2, 0, 0, 0]).q, [1, 0, 0, 0])
    with pytest.raises(ValueError):
        Pose8(s=0.0)
    with pytest.raises(ValueError):
        Pose8(s=-1.0)


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(2)
    a, b = random_pose(rng), random_pose(rng)
    pc = rng.normal(size=(10, 3))
    assert np.allclose(gm.apply_pose(pc, a.compose(b)), gm.apply_pose(gm.apply_pose(pc, b), a), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), unit=st.booleans())
def test_apply_pose_scales_distances(seed, unit):
    rng = np.random.default_rng(seed)
    pc = rng.normal(size=(8, 3))
    P = random_pose(rng, scale=not unit)
    out = gm.apply_pose(pc, P)
    d0 = np.linalg.norm(pc[:, None] - pc[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.allclose(d1, P.s * d0, atol=1e-9)


def test_matrix_quat_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        q = gm.quat_normalize(rng.normal(size=4))
        q2 = gm.matrix_to_quat(gm.quat_to_matrix(q))
        assert gm.quat_angle(q, q2) < 1e-7


# -- quat_mean ---------------------------------------------------------------

def test_quat_mean_identical():
    q = gm.quat_from_axis_angle([1, 2, 3], 0.7)
    assert np.allclose(gm.quat_mean([q, q, q]), q, atol=1e-12)


def test_quat_mean_antipodal():
    q = gm.quat_from_axis_angle([0, 1, 0], 1.1)
    m = gm.quat_mean([q, -q])
    assert gm.quat_angle(m, q) < 1e-7


def test_quat_mean_symmetric_yaw_is_identity():
    a = gm.quat_from_axis_angle([0, 0, 1], np.deg2rad(10))
    b = gm.quat_from_axis_angle([0, 0, 1], np.deg2rad(-10))
    assert np.allclose(gm.quat_mean([a, b]), [1, 0, 0, 0], atol=1e-6)


def test_quat_mean_empty():
    with pytest.raises(ValueError):
        gm.quat_mean(np.zeros((0, 4)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 6))
def test_quat_mean_sign_and_order_invariant(seed, n):
    rng = np.random.default_rng(seed)
    base = gm.quat_normalize(rng.normal(size=4))
    qs = np.array([gm.quat_mul(base, gm.quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.5)))
                   for _ in range(n)])
    m = gm.quat_mean(qs)
    flipped = qs * rng.choice([-1.0, 1.0], size=(n, 1))
    assert gm.quat_angle(gm.quat_mean(flipped[rng.permutation(n)]), m) < 1e-6


# -- voxelization ------------------------------------------------------------

def cube_cloud(center, size=1.0, n=10):
    g = np.linspace(-size / 2, size / 2, n)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    return pts + np.asarray(center)


def test_voxelize_single_point():
    grid = gm.voxelize_surface([np.zeros((1, 3))], 64)
    assert np.count_nonzero(grid.counts) == 1


def test_voxelize_disjoint_cubes_no_overlap():
    grid = gm.voxelize_surface([cube_cloud([-0.6, 0, 0], 0.5), cube_cloud([0.6, 0, 0], 0.5)], 64)
    assert np.count_nonzero(grid.counts > 1) == 0
    assert gm.collision_iou(grid) == 0.0


def test_voxelize_identical_clouds_count_two():
    pc = cube_cloud([0.1, 0.2, -0.1], 0.6)
    grid = gm.voxelize_surface([pc, pc.copy()], 64)
    occ = grid.counts[grid.counts > 0]
    assert occ.size > 0 and np.all(occ == 2)
    assert gm.collision_iou(grid) == 1.0


def test_voxelize_clamps_out_of_bounds():
    grid = gm.voxelize_surface([np.array([[5.0, -5.0, 0.0]])], 8)
    assert grid.counts[7, 0, 4] == 1


def test_voxelize_rejects_tiny_grid():
    with pytest.raises(ValueError):
        gm.voxelize_surface([np.zeros((1, 3))], 1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_voxelize_order_invariant(seed):
    rng = np.random.default_rng(seed)
    clouds = [rng.uniform(-1, 1, size=(rng.integers(1, 40), 3)) for _ in range(4)]
    a = gm.voxelize_surface(clouds, 16)
    b = gm.voxelize_surface([clouds[i] for i in rng.permutation(4)], 16)
    assert np.count_nonzero(a.counts) == np.count_nonzero(b.counts)
    assert np.array_equal(a.counts, b.counts)


# -- bbox IoU ----------------------------------------------------------------

def test_bbox_iou_cases():
    c = cube_cloud([0, 0, 0], 1.0, 3)
    assert gm.bbox_iou(c, c) == 1.0
    assert gm.bbox_iou(c, c + [5, 0, 0]) == 0.0
    assert gm.bbox_iou(c, c + [0.5, 0, 0]) == pytest.approx(1 / 3, abs=1e-12)


def test_bbox_iou_degenerate_uses_floor():
    flat = np.array([[0, 0, 0], [1, 1, 0.0]])
    assert 0.0 <= gm.bbox_iou(flat, flat) <= 1.0


# -- surfaces and IO ---------------------------------------------------------

def test_surface_mask_of_solid_cube():
    occ = np.zeros((6, 6, 6), bool)
    occ[1:5, 1:5, 1:5] = True
    surf = gm.surface_mask(occ)
    assert surf.sum() == 4 ** 3 - 2 ** 3


def test_sample_surface_on_faces():
    occ = np.zeros((4, 4, 4), bool)
    occ[1:3, 1:3, 1:3] = True
    pts = gm.sample_surface(occ, 500, np.random.default_rng(0))
    # the block spans [-0.5, 0.5]^3; every sample lies on its boundary
    assert np.all(np.abs(pts) <= 0.5 + 1e-12)
    assert np.allclose(np.max(np.abs(pts), axis=1), 0.5)


def test_ply_round_trip(tmp_path):
    pc = np.random.default_rng(0).normal(size=(17, 3))
    gm.write_ply(tmp_path / "a.ply", pc)
    assert np.array_equal(gm.read_ply(tmp_path / "a.ply"), pc)


def test_rle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    grid = gm.voxelize_surface([rng.uniform(-1, 1, (200, 3)) for _ in range(3)], 16)
    gm.write_voxels_rle(tmp_path / "g.vox", grid)
    back = gm.read_voxels_rle(tmp_path / "g.vox")
    assert np.array_equal(back.counts, grid.counts) and back.lo == -1.0

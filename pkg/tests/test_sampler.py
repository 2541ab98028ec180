import json

import numpy as np
import pytest

from scenecomp import numerics as nx
from scenecomp import sampler as sp
from scenecomp.geomath import Pose8
from scenecomp.model import ModelConfig, SceneModel

TINY = dict(dim=16, heads=2, depth=1, cond_dim=16, enc_layers=1, enc_heads=2, view_res=16, head_layers=1,
            out_hidden=32, seed=2)


@pytest.fixture(scope="module")
def model():
    with nx.default_dtype(np.float64):
        m = SceneModel(ModelConfig(**TINY))
    # larger pose-token path so predictions depend visibly on the views
    m.tokens.other.data *= 50
    return m


def scene_inputs(n_assets, seed=0, k=1):
    rng = np.random.default_rng(seed)
    views = rng.random((k, 16, 16, 3))
    masks = np.zeros((k, n_assets, 16, 16), bool)
    for i in range(n_assets):
        masks[:, i, :, 4 * i:4 * i + 4] = True
    return views, masks


def bundle_for(model, views, masks, view=0):
    return model.encode(views[view][None], masks[view][None])


def test_cfg_velocity_examples():
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    assert np.array_equal(sp.cfg_velocity(a, b, 1.0), a)
    assert np.array_equal(sp.cfg_velocity(a, b, 0.0), b)
    assert np.array_equal(sp.cfg_velocity(a, a, 5.0), a)


def test_sample_config_validation():
    with pytest.raises(ValueError):
        sp.SampleConfig(steps=0)
    with pytest.raises(ValueError):
        sp.SampleConfig(cfg_weight=-1)
    with pytest.raises(ValueError):
        sp.SampleConfig(fusion="median")


@pytest.mark.parametrize("w", [1.0, 5.0])
def test_single_step_is_one_euler_jump(model, w):
    views, masks = scene_inputs(3)
    b = bundle_for(model, views, masks)
    noise = sp.initial_noise(3, model, 11)
    res = sp.sample_scene(model, b, sp.SampleConfig(steps=1, cfg_weight=w), noise=noise)
    with nx.no_grad():
        vc = model(noise[None], [1.0], b).velocity.data[0]
        vu = model(noise[None], [1.0], b, cond=[False]).velocity.data[0]
    assert np.allclose(res.dense, noise - sp.cfg_velocity(vc, vu, w), atol=1e-12)


def test_sampling_is_deterministic_and_poses_valid(model):
    views, masks = scene_inputs(3)
    b = bundle_for(model, views, masks)
    cfg = sp.SampleConfig(steps=4, seed=5)
    r1, r2 = sp.sample_scene(model, b, cfg), sp.sample_scene(model, b, cfg)
    assert np.array_equal(r1.dense, r2.dense) and np.array_equal(r1.pose_vectors, r2.pose_vectors)
    assert len(r1.poses) == 3 and r1.poses[0].is_identity()
    assert all(isinstance(p, Pose8) and p.s > 0 for p in r1.poses)
    assert len(r1.latents) == 3


def test_non_query_permutation_permutes_samples(model):
    views, masks = scene_inputs(4)
    noise = sp.initial_noise(4, model, 3)
    perm = [0, 2, 3, 1]
    cfg = sp.SampleConfig(steps=4)
    a = sp.sample_scene(model, bundle_for(model, views, masks), cfg, noise=noise)
    b = sp.sample_scene(model, bundle_for(model, views, masks[:, perm]), cfg, noise=noise[perm])
    assert np.abs(b.dense - a.dense[perm]).max() < 1e-9
    assert np.abs(b.pose_vectors - a.pose_vectors[[p - 1 for p in perm[1:]]]).max() < 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_reports_step(model):
    with nx.default_dtype(np.float64):
        bad = SceneModel(ModelConfig(**TINY))
    bad.latent_out.fc2.bias.data[0] = np.inf
    views, masks = scene_inputs(2)
    with pytest.raises(sp.SamplingError, match="step 0"):
        sp.sample_scene(bad, bundle_for(bad, views, masks), sp.SampleConfig(steps=3))


# -- multi-view --------------------------------------------------------------

def test_single_view_multiview_is_bit_equal(model):
    views, masks = scene_inputs(3)
    cfg = sp.SampleConfig(steps=3)
    a = sp.sample_scene(model, bundle_for(model, views, masks), cfg)
    b = sp.sample_scene_multiview(model, views, masks, cfg)
    assert np.array_equal(a.dense, b.dense) and np.array_equal(a.pose_vectors, b.pose_vectors)


@pytest.mark.parametrize("fusion", ["pose", "velocity"])
def test_duplicated_view_matches_single(model, fusion):
    views, masks = scene_inputs(3)
    cfg = sp.SampleConfig(steps=3, fusion=fusion)
    one = sp.sample_scene_multiview(model, views, masks, cfg)
    two = sp.sample_scene_multiview(model, np.concatenate([views] * 2), np.concatenate([masks] * 2), cfg)
    assert np.abs(one.dense - two.dense).max() < 1e-9
    assert np.abs(one.pose_vectors - two.pose_vectors).max() < 1e-9


def test_multiview_rejects_inconsistent_assets(model):
    views, _ = scene_inputs(2, k=2)
    with pytest.raises(ValueError, match="asset count"):
        sp.sample_scene_multiview(model, views, [np.zeros((2, 16, 16)), np.zeros((3, 16, 16))])
    with pytest.raises(ValueError):
        sp.sample_scene_multiview(model, views[0], np.zeros((2, 16, 16)))


def test_average_poses():
    q = np.array([0.6, 0.8, 0, 0])
    vv = np.array([[[0, 0, 0, *q, 1.0]], [[2, 0, 0, *(-q), 3.0]]])
    avg = sp.average_poses(vv)[0]
    assert np.allclose(avg[:3], [1, 0, 0]) and avg[7] == 2.0
    assert abs(abs(avg[3:7] @ q) - 1) < 1e-12
    assert np.array_equal(sp.average_poses(vv[:1]), vv[0])


def test_view_averaging_reduces_pose_variance(model):
    base, masks = scene_inputs(3, k=1)
    K = 4
    rng = np.random.default_rng(0)
    single, fused = [], []
    for _ in range(200):
        views = np.clip(base + rng.normal(0, 0.2, size=(K,) + base.shape[1:]), 0, 1)
        r = sp.sample_scene_multiview(model, views, np.repeat(masks, K, 0), sp.SampleConfig(steps=1, cfg_weight=1.0))
        single.append(r.view_pose_vectors[0])
        fused.append(r.pose_vectors)
    var = lambda a: np.var(np.asarray(a)[..., [0, 1, 2, 7]], axis=0).sum()
    assert var(single) > 1e-8
    assert var(single) > var(fused)


# -- output bundle -----------------------------------------------------------

def test_scene_bundle_files(model, tmp_path):
    views, masks = scene_inputs(2)
    r = sp.sample_scene(model, bundle_for(model, views, masks), sp.SampleConfig(steps=2))
    out = sp.write_scene_bundle(r, tmp_path / "a", config={"steps": 2})
    man = json.loads((out / "manifest.json").read_text())
    assert man["n_assets"] == 2 and man["config"] == {"steps": 2}
    assert {"asset_00.ply", "asset_01_posed.ply", "asset_01.vox", "poses.json"} <= set(man["files"])
    back = sp.read_scene_poses(out)
    assert back[0].is_identity()
    assert np.allclose(back[1].to_vector(), r.poses[1].to_vector())
    again = sp.write_scene_bundle(r, tmp_path / "b", config={"steps": 2})
    assert json.loads((again / "manifest.json").read_text())["content_sha256"] == man["content_sha256"]

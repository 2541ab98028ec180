"""Acceptance suite: one test per criterion, each at its stated tolerance.

The terminal summary prints a PASS/FAIL line per criterion (see conftest.py).
Several checks reuse the oracles of the unit-test modules next to this file.
"""
import json
import time

import numpy as np
import pytest

import test_evaluation as te_
import test_model as tm
import test_numerics as tn
import test_sampler as ts
from scenecomp import cli
from scenecomp import geomath as gm
from scenecomp import losses as L
from scenecomp import numerics as nx
from scenecomp import sampler as sp
from scenecomp import synth
from scenecomp import trainer as tr
from scenecomp.evaluation import metrics as M
from scenecomp.evaluation import registration as RG
from scenecomp.heads import PositionHead, StructureDecoder, decode_structure
from scenecomp.model import AblationFlags, ModelConfig, SceneModel
from scenecomp.numerics.nn import merge_heads, split_heads

leaf = tn.leaf


# -- 1 -------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient integrity")
def test_gradient_integrity():
    t0 = time.perf_counter()
    for name in sorted(tn.UNARY):
        tn.test_unary_ops_gradcheck(name=name)
    tn.test_binary_broadcast_gradcheck()
    tn.test_concat_stack_scatter_linear_gradcheck()
    tn.test_matmul_grad_of_sum_is_ones_bT()
    tn.test_attention_grad()
    tn.test_layer_norm_grad()
    tm.test_dit_block_gradients()

    rng = np.random.default_rng(11)
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 4, 3))

    def rest():
        p, q = nx.split(a, [1, 3], axis=-1)
        y = nx.where(a.data > 0, nx.relu(a) * b, -b) + nx.expand(p, (2, 3, 4)) * nx.neg(q).mean()
        z = merge_heads(split_heads(nx.reshape(y, (2, 3, 4)), 2))
        return nx.tsum(nx.swapaxes(z, -1, -2) * w) + nx.tsum(nx.tsum(b * b, axis=1))

    assert nx.check_grads(rest, [a, b]) < 1e-4

    pose = leaf(np.concatenate([[0.1, -0.2, 0.05], gm.quat_normalize(rng.normal(size=4)), [1.1]]))
    gt = [gm.Pose8(rng.normal(size=3) * 0.1, gm.quat_normalize(rng.normal(size=4)), 0.9)]
    assert nx.check_grads(lambda: L.position_loss(nx.reshape(pose, (1, 8)), gt, 2.0, delta=0.5), [pose]) < 1e-4

    R = 6
    probs = [leaf(rng.uniform(0.2, 0.9, (R,) * 3)) for _ in range(2)]
    ident = gm.Pose8.identity().to_vector()
    moved = leaf(np.concatenate([[0.2, 0.1, 0.0], ident[3:]]))
    coll = lambda: L.soft_scene_iou(probs, [ident, moved], 1.5, res=8, kappa=3.0)
    assert nx.check_grads(coll, probs + [moved]) < 1e-4
    assert time.perf_counter() - t0 < 120.0


# -- 2 -------------------------------------------------------------------------

@pytest.mark.criterion(2, "loss algebra")
def test_loss_algebra():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert L.cfm_loss(eps - x0, x0, eps).item() == 0.0
    bumped = eps - x0
    bumped[1, 2] += 1e-6
    assert L.cfm_loss(bumped, x0, eps).item() > 0.0

    for delta in (0.02, 0.05, 1.0):
        quad = delta ** 2 / (2 * delta)
        lin = delta - delta / 2
        assert abs(quad - lin) <= 1e-12
        at = L.huber(np.array([delta]), delta).item()
        below = L.huber(np.array([np.nextafter(delta, 0)]), delta).item()
        above = L.huber(np.array([np.nextafter(delta, 1)]), delta).item()
        assert abs(at - below) <= 1e-12 and abs(above - at) <= 1e-12

    for seed in range(5):
        s = synth.generate_scene(200 + seed, 2 + seed % 3)
        r = np.random.default_rng(seed)
        clouds = [gm.apply_pose(gm.sample_surface(o, 2000, r), p) for o, p in zip(s.occupancies(), s.gt_poses)]
        assert L.collision_loss(clouds, s.d_scene) == 0.0
        assert L.collision_loss([clouds[0], clouds[0]], s.d_scene) == pytest.approx(0.975, abs=1e-12)
    assert L.huber(np.array([1.0]), L.DELTA_C).item() == pytest.approx(0.975, abs=1e-12)


# -- 3 -------------------------------------------------------------------------

@pytest.mark.criterion(3, "non-query permutation equivariance")
def test_equivariance():
    model = tm.make_model()
    tm.test_non_query_permutation_equivariance(model)
    with nx.default_dtype(np.float64):
        head = PositionHead(16, 2, np.random.default_rng(0), layers=2)
    ts.test_non_query_permutation_permutes_samples(sampler_model())
    tok = np.random.default_rng(2).normal(size=(1, 4, 16))
    perm = [2, 0, 3, 1]
    assert np.abs(head(tok[:, perm]).data - head(tok).data[:, perm]).max() < 1e-9


def sampler_model():
    with nx.default_dtype(np.float64):
        m = SceneModel(ModelConfig(**ts.TINY))
    m.tokens.other.data *= 50
    return m


# -- 4 -------------------------------------------------------------------------

def registration_trial(seed, n=6000):
    src, rng = te_.scene_cloud(seed, n)
    q = gm.quat_from_axis_angle(rng.normal(size=3), np.radians(rng.uniform(0, 30)))
    t = rng.uniform(-0.2, 0.2, 3)
    dst = src @ gm.quat_to_matrix(q).T + t + rng.normal(0, 0.01, src.shape)
    dst = np.concatenate([dst, rng.uniform(dst.min(0), dst.max(0), (n // 10, 3))])
    return src, dst, q, t


@pytest.mark.slow
@pytest.mark.criterion(4, "registration oracle and paired benchmark")
def test_registration_oracle():
    ok = 0
    for seed in range(100):
        src, dst, q, t = registration_trial(seed)
        r = RG.register_filterreg(src, dst)
        ok += np.degrees(gm.quat_angle(r.q, q)) < 1.0 and np.linalg.norm(r.t - t) < 1e-3
        for h in r.stages:
            assert np.all(np.diff(h) <= 1e-9 * np.abs(h[:-1]).clip(1.0)), seed
    print(f"registration oracle: {ok}/100 trials within tolerance")
    assert ok >= 95

    scenes = [M.SceneGeometry.from_sample(synth.generate_scene(300 + i, 2 + i % 3)) for i in range(5)]
    bench = M.paired_benchmark(scenes, trials=50)
    print("paired benchmark mean CD-S:", {m: round(v["mean"], 5) for m, v in bench.items()})
    assert bench["filterreg"]["mean"] <= bench["icp"]["mean"]


# -- 5 -------------------------------------------------------------------------

@pytest.mark.criterion(5, "metric oracles")
def test_metric_oracles():
    te_.test_chamfer_closed_forms()
    te_.test_chamfer_matches_brute_force()
    te_.test_fscore_closed_forms()
    gt = M.SceneGeometry.from_sample(synth.generate_scene(3, 3))
    for seed in (0, 1, 2):
        te_.test_evaluation_invariant_to_global_rigid_transform(gt, seed)


# -- 6 -------------------------------------------------------------------------

OVERFIT_BUDGET_S = 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(6, "overfit end-to-end")
def test_overfit_end_to_end():
    scenes = [synth.generate_scene(100 + i, 2 + i % 3) for i in range(8)]
    t0 = time.process_time()
    res = tr.overfit_run(scenes)
    cpu = time.process_time() - t0
    ious, terr, rerr, serr = [], [], [], []
    for s in scenes:
        with nx.default_dtype(np.float32):
            b = res.model.encode(s.views[0][None], s.masks[0][None])
        out = sp.sample_scene(res.model, b, sp.SampleConfig(steps=25, cfg_weight=5.0, seed=1), decoder=res.decoder)
        for lat, occ in zip(out.latents, s.occupancies()):
            g, _ = decode_structure(lat, res.decoder)
            ious.append(tr.occupancy_iou(g.counts, occ))
        for p, q in zip(out.poses[1:], s.gt_poses[1:]):
            terr.append(np.linalg.norm(p.t - q.t) / s.d_scene)
            rerr.append(np.degrees(gm.quat_angle(p.q, q.q)))
            serr.append(abs(p.s - q.s) / q.s)
    print(f"overfit: {res.epochs} epochs, cpu {cpu:.0f}s, IoU min {min(ious):.3f} mean {np.mean(ious):.3f}, "
          f"t {np.mean(terr):.4f} d_scene, r {np.mean(rerr):.2f} deg, s {100 * np.mean(serr):.2f}%")
    assert cpu <= OVERFIT_BUDGET_S
    assert np.mean(terr) < 0.05 and np.mean(rerr) < 10.0 and np.mean(serr) < 0.10
    assert min(ious) > 0.8


# -- 7 -------------------------------------------------------------------------

@pytest.mark.criterion(7, "multi-view contract")
def test_multiview_contract():
    m = sampler_model()
    ts.test_single_view_multiview_is_bit_equal(m)
    for fusion in ("pose", "velocity"):
        ts.test_duplicated_view_matches_single(m, fusion)
    ts.test_view_averaging_reduces_pose_variance(m)


# -- 8 -------------------------------------------------------------------------

def cross_asset_jacobian(m, use_global=True, probes=3):
    """Largest |d <R, clean_0> / d x_j| over other assets j, for random probes R."""
    b = tm.rand_bundle(m, 3, seed=7)
    worst, own = 0.0, 0.0
    for k in range(probes):
        x = nx.Tensor(tm.rand_latent(m, 3, seed=8), requires_grad=True)
        out = m(x, [0.5], b, use_global=use_global)
        R = np.random.default_rng(k).normal(size=out.clean.shape[2:])
        nx.backward(nx.tsum(out.clean[:, 0] * R))
        worst = max(worst, np.abs(x.grad[:, 1:]).max())
        own = max(own, np.abs(x.grad[:, 0]).max())
    return worst, own


@pytest.mark.criterion(8, "ablation harness")
def test_ablation_harness(tmp_path):
    model = tm.make_model()
    tm.test_drop_flags_shorten_scene_context(model)
    tm.test_flags_off_matches_default(model)
    cross, own = cross_asset_jacobian(model.with_flags(AblationFlags(ss_to_as=True)))
    assert cross == 0.0 and own > 0
    assert cross_asset_jacobian(model)[0] > 0

    cfg = {"data": {"min_assets": 2, "max_assets": 3}, "decoder": {"steps": 10},
           "train": {"epochs": 1, "batch_size": 2, "trainable": "generator", "augment": False,
                     "dtype": "float64", "model": {**tm.SMALL, "depth": 1, "view_res": 32, "latent_res": 16}},
           "sample": {"steps": 2}, "eval": {"n_points": 256}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    run = lambda *a: cli.main([str(x) for x in a])
    assert run("gen-data", "--config", tmp_path / "cfg.json", "--scenes", 2, "--out", tmp_path / "c") == 0
    assert run("train-decoder", "--config", tmp_path / "cfg.json", "--data", tmp_path / "c",
               "--out", tmp_path / "d") == 0
    assert run("ablate", "--config", tmp_path / "cfg.json", "--data", tmp_path / "c", "--decoder",
               tmp_path / "d/decoder.sckp", "--scenes", 1, "--out", tmp_path / "abl") == 0
    lines = (tmp_path / "abl/ablation.md").read_text().splitlines()
    assert len(lines) == 7
    for col in ("global geometric features", "global visual features", "mask visual features",
                "scene-level self-attention", "CD-S", "CD-O", "F-Score-S", "F-Score-O", "IoU-B"):
        assert col in lines[0]
    assert [sum("✗" in c for c in ln.split("|")[2:6]) for ln in lines[2:]] == [0, 1, 2, 3, 4]


# -- 9 -------------------------------------------------------------------------

@pytest.mark.criterion(9, "reproducibility")
def test_reproducibility(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--seed", "3", "--scenes", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/corpus.bin").read_bytes() == (tmp_path / "b/corpus.bin").read_bytes()

    scenes = [synth.generate_scene(40 + i, n) for i, n in enumerate([2, 2, 3, 1])]
    cfg = tr.TrainConfig(lr=1e-3, batch_size=2, augment=False, dtype="float64",
                         model={**ts.TINY, "view_res": 32}, seed=4)

    def dec():
        with nx.default_dtype(np.float64):
            return StructureDecoder(np.random.default_rng(0))

    weights = []
    for name in ("a", "b"):
        T = tr.Trainer(cfg, dec(), scenes, log_path=tmp_path / f"{name}.jsonl")
        T.fit(2)
        tr.save_model(T.model, tmp_path / f"{name}.sckp")
        weights.append((tmp_path / f"{name}.sckp").read_bytes())
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert weights[0] == weights[1]

    m = sampler_model()
    views, masks = ts.scene_inputs(3)
    outs = []
    for name in ("a", "b"):
        r = sp.sample_scene(m, ts.bundle_for(m, views, masks), sp.SampleConfig(steps=3, seed=5), decoder=dec())
        outs.append(sp.write_scene_bundle(r, tmp_path / f"s_{name}"))
    for f in sorted(p.name for p in outs[0].iterdir()):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f

    import test_trainer as tt
    tt.test_checkpoint_resume_is_bit_identical(scenes, tmp_path / "resume")

import numpy as np
import pytest

from scenecomp import heads as H
from scenecomp import numerics as nx
from scenecomp import synth
from scenecomp import trainer as tr
from scenecomp.latents import C_LAT, D_LAT, SparseLatent


@pytest.fixture(scope="module")
def head():
    with nx.default_dtype(np.float64):
        return H.PositionHead(16, 2, np.random.default_rng(0), layers=2)


def fixed_decoder(bias: float) -> H.StructureDecoder:
    with nx.default_dtype(np.float64):
        dec = H.StructureDecoder(np.random.default_rng(0))
    dec.fc3.weight.data[...] = 0
    dec.fc3.bias.data[...] = bias
    return dec


# -- position head -----------------------------------------------------------

def test_query_only_scene_gives_no_poses(head):
    out = head(np.zeros((1, 0, 16)))
    assert out.shape == (1, 0, 8)
    assert H.assemble_poses(np.zeros((0, 8)), 1)[0].is_identity()


def test_quaternion_normalized():
    raw = nx.Tensor(np.array([[0.1, 0.2, 0.3, 2.0, 0, 0, 0, 0.0]]))
    out = H.constrain_pose(raw).data[0]
    assert np.allclose(out[3:7], [1, 0, 0, 0], atol=1e-15)
    assert np.allclose(out[:3], [0.1, 0.2, 0.3])
    assert out[7] == pytest.approx(np.log(2.0) + H.SCALE_FLOOR)


@pytest.mark.parametrize("mag", [1e6, -1e6])
def test_extreme_tokens_give_valid_poses(head, mag):
    tok = np.random.default_rng(1).normal(size=(2, 3, 16)) * mag
    out = head(tok).data
    assert np.all(np.isfinite(out))
    assert np.allclose(np.linalg.norm(out[..., 3:7], axis=-1), 1.0)
    assert np.all(out[..., 7] > 0)


def test_extreme_raw_outputs_stay_valid():
    raw = nx.Tensor(np.array([[1e6, -1e6, 0, 1e6, -1e6, 1e6, 0, -1e6], [0, 0, 0, 0, 0, 0, 0, 1e6]]))
    out = H.constrain_pose(raw).data
    assert np.all(np.isfinite(out)) and np.all(out[:, 7] > 0)
    assert np.allclose(np.linalg.norm(out[0, 3:7]), 1.0)


def test_head_permutation_equivariant(head):
    tok = np.random.default_rng(2).normal(size=(1, 4, 16))
    perm = [2, 0, 3, 1]
    a = head(tok).data
    b = head(tok[:, perm]).data
    assert np.abs(b - a[:, perm]).max() < 1e-12


def test_assemble_inserts_identity_at_query():
    vecs = np.array([[1, 0, 0, 1, 0, 0, 0, 2.0], [0, 1, 0, 1, 0, 0, 0, 3.0]])
    poses = H.assemble_poses(vecs, 3, query_index=1)
    assert poses[1].is_identity() and poses[0].s == 2.0 and poses[2].s == 3.0
    with pytest.raises(ValueError):
        H.assemble_poses(vecs, 4)


# -- clean-latent inversion --------------------------------------------------

def test_predict_clean_identities():
    rng = np.random.default_rng(3)
    x0, eps = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    xt = rng.normal(size=(4, 4))
    assert np.array_equal(H.predict_clean(xt, rng.normal(size=(4, 4)), 0.0), xt)
    assert np.allclose(H.predict_clean(eps, eps - x0, 1.0), x0, atol=1e-15)
    t = rng.random()
    v = rng.normal(size=(4, 4))
    x_hat = H.predict_clean(xt, v, t)
    assert np.abs((1 - t) * x_hat + t * (x_hat + v) - xt).max() < 1e-12


# -- structure decoder -------------------------------------------------------

def test_all_negative_logits_decode_empty():
    lat = SparseLatent([[1, 2, 3], [4, 5, 6]], np.ones((2, C_LAT)))
    grid, pts = H.decode_structure(lat, fixed_decoder(-3.0))
    assert not grid.counts.any() and pts.shape == (0, 3)


def test_single_voxel_all_positive_fills_eight_subcells():
    lat = SparseLatent([[3, 4, 5]], np.ones((1, C_LAT)))
    grid, pts = H.decode_structure(lat, fixed_decoder(3.0))
    idx = np.argwhere(grid.counts)
    assert len(idx) == 8
    assert idx.min(0).tolist() == [6, 8, 10] and idx.max(0).tolist() == [7, 9, 11]
    assert len(pts) == 8 and np.all(np.abs(pts) <= 1.0)


def test_soft_occupancy_layout_matches_hard_decode():
    rng = np.random.default_rng(4)
    with nx.default_dtype(np.float64):
        dec = H.StructureDecoder(rng)
    dense = rng.normal(size=(D_LAT,) * 3 + (C_LAT,))
    soft = H.soft_occupancy(dec, dense, sharpness=1.0).data
    lat = SparseLatent.from_dense(dense, np.ones((D_LAT,) * 3, bool))
    grid, _ = H.decode_structure(lat, dec)
    assert np.array_equal(soft > 0.5, grid.counts.astype(bool))


def test_decoder_reconstructs_held_out_shapes():
    rng = np.random.default_rng(5)
    train = [synth.make_asset(synth.SHAPE_KINDS[i % len(synth.SHAPE_KINDS)], rng).occupancy for i in range(16)]
    held = [synth.make_asset(synth.SHAPE_KINDS[i % len(synth.SHAPE_KINDS)], rng).occupancy for i in range(8)]
    dec = tr.train_decoder(train, steps=120, seed=0)
    ious = tr.decoder_iou(dec, held)
    assert min(ious) > 0.9


def test_empty_sparse_latent_round_trip():
    dec = fixed_decoder(-3.0)
    lat = dec.to_sparse(np.zeros((D_LAT,) * 3 + (C_LAT,)))
    assert len(lat) == 0 and lat.feats.shape == (0, C_LAT)
    grid, pts = H.decode_structure(lat, dec)
    assert not grid.counts.any() and pts.shape == (0, 3)

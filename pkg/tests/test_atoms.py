import logging

import numpy as np
import pytest

from inrd.atoms import (ablate_atom, active_fraction, atom_map, dictionary_stats, gallery, ipr_fraction,
                        layer_codes)
from inrd.cohort import cohort_train
from inrd.errors import ContractError
from inrd.inr import FFMLP, SIREN, InrConfig, forward, forward_from, make_grid, reconstruct
from inrd.sae import SaeConfig, SaeModel, collect_activations, encode, init_sae, train_sae
from inrd.synth import synth_image


@pytest.fixture(scope="module", params=[SIREN, FFMLP])
def setup(request):
    cfg = InrConfig(request.param, hidden_layers=3, width=12, feature_count=8, sigma_b=2.0, dtype="float64")
    imgs = [synth_image("blobs", 10, 10, j) for j in range(2)]
    ck = cohort_train(imgs, cfg, iters=20, lr=1e-3, psnr_stop=99)
    data = collect_activations(ck, 1)
    sae = train_sae(data, SaeConfig(12, dict_size=24, k=4, train_steps=30, lr=1e-3, batch_size=64, dtype="float64"))
    return ck, sae, imgs


def test_collect_pools_all_images(setup):
    ck, _, _ = setup
    data = collect_activations(ck, 1)
    assert data.rows.shape == (200, 12) and data.provenance == [(0, 10, 10), (1, 10, 10)]
    with pytest.raises(ContractError):
        collect_activations(ck, 3)


def test_atom_map_matches_pointwise_encode(setup):
    ck, sae, _ = setup
    h, _ = layer_codes(ck, sae, 1, (10, 10))
    for a in (0, 5):
        amap = atom_map(ck, sae, 1, a)
        ref = np.array([encode(sae, row)[a] for row in h]).reshape(10, 10)
        # BLAS may reorder the batched sums, so values agree to rounding and the support exactly
        assert np.array_equal(amap.values > 0, ref > 0)
        np.testing.assert_allclose(amap.values, ref, atol=1e-12, rtol=0)
        assert (amap.values >= 0).all() and 0 <= amap.active_frac <= 1
    with pytest.raises(ContractError):
        atom_map(ck, sae, 1, 24)


def test_fraction_and_ipr_examples():
    v = np.zeros(100)
    v[:3] = 0.5
    assert active_fraction(v) == 0.03
    assert active_fraction(np.zeros(100)) == 0.0
    assert ipr_fraction(np.ones(50)) == 1.0
    spike = np.zeros(50)
    spike[7] = 2.0
    assert abs(ipr_fraction(spike) - 1 / 50) < 1e-15
    assert np.isnan(ipr_fraction(np.zeros(4)))


def test_ablation_exactness(setup):
    ck, sae, imgs = setup
    h, z = layer_codes(ck, sae, 1, (10, 10))
    a = int(np.argmax((z > 0).sum(axis=0)))
    res = ablate_atom(ck, sae, 1, a, imgs[0], keep_activation=True)
    expected = h - z[:, [a]] * sae.W_dec[a][None, :]
    assert np.abs(res.ablated_activation - expected).max() <= 1e-10
    np.testing.assert_array_equal(res.ablated.reshape(100, -1), forward_from(ck.model(0), res.ablated_activation, 1))
    np.testing.assert_allclose(res.delta, res.reconstruction - res.ablated, atol=0)


def test_null_ablation_is_identity(setup):
    ck, sae, imgs = setup
    _, z = layer_codes(ck, sae, 1, (10, 10))
    # make atom 0 unable to fire
    dead = SaeModel(sae.W_enc.copy(), sae.b_enc.copy(), sae.W_dec, sae.b_pre, sae.config)
    dead.W_enc[0] = 0
    dead.b_enc[0] = -1.0
    res = ablate_atom(ck, dead, 1, 0, imgs[0])
    clean = reconstruct(ck.model(0), 10, 10)
    assert np.array_equal(res.ablated, clean) and np.array_equal(res.reconstruction, clean)
    assert not res.delta.any() and res.psnr_drop == 0.0


def test_ablating_the_whole_activation_gives_zero():
    cfg = InrConfig(SIREN, hidden_layers=2, width=3, dtype="float64")
    ck = cohort_train([synth_image("gradient", 4, 4, 0)], cfg, iters=1, lr=1e-3, psnr_stop=99)
    h = forward(ck.model(0), make_grid(4, 4), capture=[0]).activations[0]
    # one atom spanning the direction of a rank-1 construction
    w = np.array([1.0, 0.0, 0.0])
    ck.weights[0][:] = 0
    ck.weights[0][0, 0] = 0.02
    ck.biases[0][:] = [0.03, 0.0, 0.0]
    h = forward(ck.model(0), make_grid(4, 4), capture=[0]).activations[0]
    assert (h[:, 0] > 0).all() and not h[:, 1:].any()
    sae = SaeModel(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.zeros(2), np.array([w, [0, 1.0, 0]]), np.zeros(3),
                   SaeConfig(3, dict_size=2, k=1, dtype="float64"))
    res = ablate_atom(ck, sae, 0, 0, synth_image("gradient", 4, 4, 0), keep_activation=True)
    assert np.abs(res.ablated_activation).max() == 0.0


def test_dictionary_stats_consistency(setup):
    ck, sae, _ = setup
    st = dictionary_stats(ck, sae, 1)
    assert st.dead_rate == 1 - st.alive_count / st.n
    assert abs(st.dead_rate * 100 + st.alive_pct - 100) < 1e-12
    assert st.median_active_frac == float(np.median(st.active_frac[st.alive]))
    assert st.spatial_l0 == float(st.fire_rate[st.alive].mean())
    rows = list(st.rows())
    assert len(rows) == sae.n and {r["dead"] for r in rows} <= {0, 1}
    assert st.topk_mean_maps[0].shape == (10, 10)


def test_dead_rate_example():
    cfg = InrConfig(SIREN, hidden_layers=1, width=2, dtype="float64")
    ck = cohort_train([synth_image("blobs", 5, 5, 0)], cfg, iters=1, lr=1e-3, psnr_stop=99)
    W = np.array([[1.0, 0], [0, 1.0], [0, 0], [0, 0]])
    sae = SaeModel(W, np.array([5.0, 5.0, -1.0, -1.0]), np.vstack([np.eye(2), np.eye(2)]), np.zeros(2),
                   SaeConfig(2, dict_size=4, k=2, dtype="float64"))
    st = dictionary_stats(ck, sae, 0)
    assert st.dead_rate == 0.5 and list(st.alive) == [True, True, False, False]


def test_gallery_ranking_and_padding(setup, tmp_path, caplog):
    ck, sae, _ = setup
    st = dictionary_stats(ck, sae, 1, [(10, 10)])
    canvas, ranking = gallery(ck, {1: sae}, top_m=4, path=tmp_path / "g.png")
    assert ranking[1] == [int(a) for a in st.ranking() if st.alive[a]][:4]
    again, _ = gallery(ck, {1: sae}, top_m=4)
    assert np.array_equal(canvas, again) and (tmp_path / "g.png").exists()
    with caplog.at_level(logging.WARNING):
        gallery(ck, {1: sae}, top_m=sae.n + 2)
    assert "padding" in caplog.text

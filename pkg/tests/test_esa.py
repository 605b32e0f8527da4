"""USSA, LRF, DLRM, and the attention blocks: analytic oracles and gradients."""

import math

import numpy as np
import pytest

from ect import tensor as T
from ect.esa import (Esa, Esab, EsaConfig, Ffn, LowRankFeatures,
                     PositionalEncoding, dlrm, ussa)
from ect.sd3d import sd3d_split
from ect.tensor import ShapeError, Tensor, grad_check


@pytest.fixture(autouse=True)
def f64():
    with T.precision("f64"):
        yield


def tau(v=1.0):
    return Tensor(np.array([v]))


# -- USSA ------------------------------------------------------------------

def test_ussa_single_token_is_one():
    q = Tensor(np.random.default_rng(0).normal(size=(1, 5)))
    out = ussa(q, q, tau()).numpy()
    np.testing.assert_allclose(out, [[1.0]], atol=1e-12)


def test_ussa_zero_temperature_uniform():
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=(6, 4)))
    k = Tensor(rng.normal(size=(6, 4)))
    out = ussa(q, k, tau(0.0)).numpy()
    np.testing.assert_allclose(out, 1.0 / 6.0, atol=1e-12)


def test_ussa_orthogonal_tokens_analytic():
    # orthogonal rows: similarity = I; softmax diag = e / (e + n - 1)
    q = Tensor(np.array([[2.0, 0.0], [0.0, 0.5]]))
    out = ussa(q, q, tau()).numpy()
    diag = math.e / (math.e + 1.0)
    np.testing.assert_allclose(out, [[diag, 1 - diag], [1 - diag, diag]], atol=1e-12)
    assert abs(diag - 0.7310585786300049) < 1e-12


def test_ussa_row_stochastic_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = Tensor(rng.normal(size=(8, 6)))
        k = Tensor(rng.normal(size=(8, 6)))
        out = ussa(q, k, tau(rng.uniform(0.1, 5.0))).numpy()
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-5)


def test_ussa_positive_scale_invariance():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(5, 4))
    k = rng.normal(size=(5, 4))
    scales = rng.uniform(0.1, 10.0, size=(5, 1))
    a = ussa(Tensor(q), Tensor(k), tau(2.0)).numpy()
    b = ussa(Tensor(q * scales), Tensor(k), tau(2.0)).numpy()
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_ussa_permutation_equivariance():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(6, 4))
    k = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a = ussa(Tensor(q), Tensor(k), tau()).numpy()
    b = ussa(Tensor(q[perm]), Tensor(k), tau()).numpy()
    np.testing.assert_allclose(b, a[perm], atol=1e-6)
    c = ussa(Tensor(q), Tensor(k[perm]), tau()).numpy()
    np.testing.assert_allclose(c, a[:, perm], atol=1e-6)


# -- DLRM ------------------------------------------------------------------

def test_dlrm_rank_one_is_all_ones():
    # k=1 simplex rows are exactly [1.0]; D = 1 1^T
    qf = Tensor(np.ones((5, 1)))
    kf = Tensor(np.ones((5, 1)))
    out = dlrm(qf, kf).numpy()
    np.testing.assert_allclose(out, 1.0, atol=0)


def test_dlrm_one_hot_rows_give_block_matrix():
    e = np.eye(3)
    qf = Tensor(e[[0, 0, 1, 2]])
    kf = Tensor(e[[0, 1, 1, 2]])
    out = dlrm(qf, kf).numpy()
    expect = np.array([[1, 0, 0, 0], [1, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 1]], dtype=float)
    np.testing.assert_array_equal(out, expect)


def test_dlrm_entries_in_unit_interval():
    rng = np.random.default_rng(5)
    for _ in range(20):
        qf = T.softmax(Tensor(rng.normal(size=(10, 4))), axis=-1)
        kf = T.softmax(Tensor(rng.normal(size=(10, 4))), axis=-1)
        out = dlrm(qf, kf).numpy()
        assert np.all(out > 0.0) and np.all(out <= 1.0)


def test_dlrm_rank_bound():
    rng = np.random.default_rng(6)
    for k in (1, 3, 5):
        qf = T.softmax(Tensor(rng.normal(size=(12, k))), axis=-1)
        kf = T.softmax(Tensor(rng.normal(size=(12, k))), axis=-1)
        sv = np.linalg.svd(dlrm(qf, kf).numpy(), compute_uv=False)
        assert sv[min(k, 11)] / sv[0] < 1e-10


def test_dlrm_rank_mismatch_rejected():
    with pytest.raises(ShapeError):
        dlrm(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 3))))


# -- LRF -------------------------------------------------------------------

def cross_cfg(channels=8, c=4, s=2, k=4, heads=1, use_dlrm=True):
    return EsaConfig("cross", channels=channels, c=c, s=s, k=k, heads=heads,
                     use_dlrm=use_dlrm)


def inter_cfg(channels=8, c=8, s=2, k=4, heads=2, use_dlrm=True):
    return EsaConfig("inter", channels=channels, c=c, s=s, k=k, heads=heads,
                     use_dlrm=use_dlrm)


def test_lrf_k1_outputs_ones():
    rng = np.random.default_rng(7)
    cfg = cross_cfg(k=1)
    lrf = LowRankFeatures(cfg, rng)
    grid = sd3d_split(Tensor(rng.normal(size=(8, 8, 8))), cfg.c, cfg.s)
    out = lrf.forward(grid).numpy()
    np.testing.assert_allclose(out, 1.0, atol=0)  # softmax over a single logit


def test_lrf_rows_on_simplex():
    rng = np.random.default_rng(8)
    cfg = cross_cfg()
    lrf = LowRankFeatures(cfg, rng)
    grid = sd3d_split(Tensor(rng.normal(size=(8, 8, 8))), cfg.c, cfg.s)
    out = lrf.forward(grid).numpy()
    assert out.shape == (grid.n, cfg.k)
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_lrf_zero_kernel_gives_uniform_rows():
    rng = np.random.default_rng(9)
    cfg = cross_cfg()
    lrf = LowRankFeatures(cfg, rng)
    lrf.conv.weight.data[...] = 0.0
    lrf.conv.bias.data[...] = 0.0
    grid = sd3d_split(Tensor(rng.normal(size=(8, 8, 8))), cfg.c, cfg.s)
    out = lrf.forward(grid).numpy()
    np.testing.assert_allclose(out, 1.0 / cfg.k, atol=1e-12)


def test_lrf_rejects_tiny_tiles():
    rng = np.random.default_rng(10)
    cfg = EsaConfig("cross", channels=8, c=4, s=4, k=4)
    lrf = LowRankFeatures(cfg, rng)
    grid = sd3d_split(Tensor(rng.normal(size=(8, 4, 4))), cfg.c, cfg.s)
    with pytest.raises(ShapeError):
        lrf.forward(grid)  # 1x1 tiles cannot feed the 2x2 pooling grid


def test_lrf_inter_shape():
    rng = np.random.default_rng(11)
    cfg = inter_cfg()
    lrf = LowRankFeatures(cfg, rng)
    grid = sd3d_split(Tensor(rng.normal(size=(8, 8, 8))), cfg.c, cfg.s)
    out = lrf.forward(grid).numpy()
    assert out.shape == (grid.n, cfg.c, cfg.k)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# -- config validation -----------------------------------------------------

def test_config_rejects_bad_factors():
    with pytest.raises(ShapeError):
        EsaConfig("cross", channels=8, c=3, s=2, k=4)
    with pytest.raises(ShapeError):
        EsaConfig("cross", channels=8, c=4, s=2, k=4, heads=3)
    with pytest.raises(ShapeError):
        EsaConfig("cross", channels=8, c=4, s=1, k=99)
    with pytest.raises(ShapeError):
        EsaConfig("inter", channels=8, c=4, s=2, k=5)  # k > c
    with pytest.raises(ValueError):
        EsaConfig("diag", channels=8, c=4, s=2, k=4)


# -- blocks ----------------------------------------------------------------

def randomized(mod, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in mod.params():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return mod


def test_ffn_zero_weights_zero_output():
    rng = np.random.default_rng(12)
    ffn = Ffn(8, rng)
    for p in ffn.params():
        p.data[...] = 0.0
    out = ffn.forward(Tensor(rng.normal(size=(8, 4, 4)))).numpy()
    np.testing.assert_allclose(out, 0.0, atol=0)


def test_positional_encoding_residual():
    rng = np.random.default_rng(13)
    pe = PositionalEncoding(8, 4, rng)
    for p in pe.params():
        p.data[...] = 0.0
    x = rng.normal(size=(8, 5, 5))
    out = pe.forward(Tensor(x)).numpy()
    np.testing.assert_allclose(out, x, atol=0)  # zero encoder -> identity


def test_esa_preserves_shape():
    rng = np.random.default_rng(14)
    for cfg in (cross_cfg(), inter_cfg(), cross_cfg(use_dlrm=False)):
        esa = Esa(cfg, rng)
        x = Tensor(rng.normal(size=(8, 8, 8)))
        assert esa.forward(x).shape == (8, 8, 8)


def test_esa_rejects_wrong_channels():
    rng = np.random.default_rng(15)
    esa = Esa(cross_cfg(), rng)
    with pytest.raises(ShapeError):
        esa.forward(Tensor(np.zeros((4, 8, 8))))


def test_esab_residual_identity_when_branches_vanish():
    rng = np.random.default_rng(16)
    blk = Esab(cross_cfg(), rng)
    # zero the value path and both mixers -> ESA emits exactly 0
    blk.esa.wv.weight.data[...] = 0.0
    blk.esa.wv.bias.data[...] = 0.0
    blk.esa.proj.weight.data[...] = 0.0
    blk.esa.proj.bias.data[...] = 0.0
    # zero the FFN tail
    blk.ffn.contract.weight.data[...] = 0.0
    blk.ffn.contract.bias.data[...] = 0.0
    x = rng.normal(size=(8, 8, 8))
    out = blk.forward(Tensor(x)).numpy()
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_esab_cross_gradcheck():
    blk = randomized(Esab(cross_cfg(), np.random.default_rng(17)), seed=18)
    rng = np.random.default_rng(19)
    x = Tensor(rng.normal(size=(8, 8, 8)))
    ref = Tensor(rng.normal(size=(8, 8, 8)))
    err = grad_check(lambda: T.mean(T.mul(blk.forward(x), ref)),
                     blk.params(), max_coords_per_param=3, seed=0)
    assert err <= 1e-4, f"cross block gradient error {err:.3e}"


def test_esab_inter_gradcheck():
    blk = randomized(Esab(inter_cfg(), np.random.default_rng(20)), seed=21)
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(8, 8, 8)))
    ref = Tensor(rng.normal(size=(8, 8, 8)))
    err = grad_check(lambda: T.mean(T.mul(blk.forward(x), ref)),
                     blk.params(), max_coords_per_param=3, seed=0)
    assert err <= 1e-4, f"inter block gradient error {err:.3e}"


def test_inter_dependence_map_shape_16x16():
    rng = np.random.default_rng(23)
    cfg = EsaConfig("inter", channels=16, c=16, s=4, k=8, heads=2)
    esa = Esa(cfg, rng)
    x = Tensor(rng.normal(size=(16, 16, 16)))
    out = esa.forward(x)
    assert out.shape == (16, 16, 16)
    # the per-token dependence map is c x c
    grid = sd3d_split(Tensor(rng.normal(size=(16, 16, 16))), cfg.c, cfg.s)
    dep = dlrm(esa.lrf_q.forward(grid), esa.lrf_k.forward(grid))
    assert dep.shape == (grid.n, cfg.c, cfg.c)
    d = dep.numpy()
    assert np.all(d > 0.0) and np.all(d <= 1.0)

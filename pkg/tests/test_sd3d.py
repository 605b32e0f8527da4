"""SD3D split/align: exact bijection, counting identities, channel shuffle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ect.sd3d import (SplitSpec, TokenGrid, channel_shuffle, sd3d_align,
                      sd3d_split)
from ect.tensor import ShapeError, Tensor


def rand_map(rng, C, H, W):
    return Tensor(rng.normal(size=(C, H, W)).astype(np.float64))


def test_counting_identities():
    spec = SplitSpec(c=4, s=2, H=8, W=8, C=32)
    assert spec.n_tokens == 32 * 4 // 4 == 32
    assert spec.token_dim == 8 * 8 * 4 // 4 == 64
    assert spec.n_tokens * spec.token_dim == 32 * 8 * 8


def test_default_cross_factorization_attention_axis():
    # C=32, c=4, s=2 -> attention axis length n = 32
    spec = SplitSpec(c=4, s=2, H=16, W=16, C=32)
    assert spec.n_tokens == 32


def test_bijection_exact_small():
    rng = np.random.default_rng(0)
    x = rand_map(rng, 8, 4, 4)
    grid = sd3d_split(x, c=2, s=2)
    back = sd3d_align(grid)
    assert np.array_equal(back.numpy(), x.numpy())  # bitwise


def test_degenerate_c1_s1_is_channel_tokens():
    # each token is one full channel plane, in channel order
    x = Tensor(np.arange(2 * 2 * 2, dtype=np.float64).reshape(2, 2, 2))
    grid = sd3d_split(x, c=1, s=1)
    assert grid.tokens.shape == (2, 4)
    np.testing.assert_array_equal(grid.tokens.numpy(),
                                  [[0, 1, 2, 3], [4, 5, 6, 7]])


def test_token_structure_strided_channels_contiguous_tiles():
    # C=4, c=2 -> groups G=2, token channels are G apart: {0,2} and {1,3}
    C, H, W = 4, 4, 4
    x = Tensor(np.arange(C * H * W, dtype=np.float64).reshape(C, H, W))
    grid = sd3d_split(x, c=2, s=2)
    assert grid.tokens.shape == (8, 8)
    tok0 = grid.tokens.numpy()[0]
    # token 0: channels {0, 2}, top-left 2x2 tile, channel-major rows
    expect = np.concatenate([x.numpy()[0, :2, :2].ravel(),
                             x.numpy()[2, :2, :2].ravel()])
    np.testing.assert_array_equal(tok0, expect)


def test_every_element_used_exactly_once():
    rng = np.random.default_rng(1)
    x = rand_map(rng, 8, 6, 6)
    grid = sd3d_split(x, c=4, s=2)
    srt_in = np.sort(x.numpy().ravel())
    srt_out = np.sort(grid.tokens.numpy().ravel())
    assert np.array_equal(srt_in, srt_out)


def test_align_rejects_inconsistent_tokens():
    spec = SplitSpec(c=2, s=2, H=4, W=4, C=4)
    bad = TokenGrid(tokens=Tensor(np.zeros((3, 3))), spec=spec)
    with pytest.raises(ShapeError):
        sd3d_align(bad)


def test_split_rejects_indivisible():
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeError):
        sd3d_split(rand_map(rng, 5, 4, 4), c=2, s=2)
    with pytest.raises(ShapeError):
        sd3d_split(rand_map(rng, 4, 5, 4), c=2, s=2)


def test_channel_shuffle_example():
    # 4 channels, 2 groups: [0, 1, 2, 3] -> [0, 2, 1, 3]
    x = Tensor(np.arange(4, dtype=np.float64).reshape(4, 1, 1))
    out = channel_shuffle(x, 2)
    np.testing.assert_array_equal(out.numpy().ravel(), [0, 2, 1, 3])


def test_channel_shuffle_twice_with_cofactor_inverts():
    rng = np.random.default_rng(3)
    x = rand_map(rng, 12, 2, 2)
    once = channel_shuffle(x, 3)
    back = channel_shuffle(once, 4)  # transpose of a (3, 4) view inverts via (4, 3)
    assert np.array_equal(back.numpy(), x.numpy())


def test_split_is_differentiable_permutation():
    import ect.tensor as T
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    grid = sd3d_split(x, c=2, s=2)
    r = np.random.default_rng(5).normal(size=grid.tokens.shape)
    T.sum_(T.mul(grid.tokens, Tensor(r))).backward()
    # permutation adjoint: gradient is r routed back through the inverse index
    back = sd3d_align(TokenGrid(tokens=Tensor(r), spec=grid.spec))
    np.testing.assert_allclose(x.grad, back.numpy(), atol=0)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 3]),
       st.integers(1, 3), st.integers(1, 3), st.sampled_from([4, 8, 12]))
def test_bijection_property(c, s, hm, wm, C):
    if C % c:
        C = c * max(1, C // c)
    H, W = s * hm, s * wm
    rng = np.random.default_rng(c * 131 + s * 17 + H * 3 + W + C)
    x = Tensor(rng.normal(size=(C, H, W)))
    grid = sd3d_split(x, c=c, s=s)
    spec = grid.spec
    assert spec.n_tokens == C * s * s // c
    assert spec.n_tokens * spec.token_dim == C * H * W
    assert np.array_equal(sd3d_align(grid).numpy(), x.numpy())

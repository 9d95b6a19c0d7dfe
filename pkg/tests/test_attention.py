"""Window partitioning and attention checked against a naive f64 oracle."""

import numpy as np
import pytest

from beyondfov import attention as A
from beyondfov import tensor as T


def rng(seed):
    return np.random.default_rng(seed)


def rand_params(c, heads, seed, zero_out=False):
    r = rng(seed)

    def w():
        return T.Tensor((r.standard_normal((c, c)) * 0.3).astype(np.float32))

    wo = T.Tensor(np.zeros((c, c), np.float32)) if zero_out else w()
    return A.AttentionParams(wq=w(), wk=w(), wv=w(), wo=wo, num_heads=heads)


def naive_attention(q_in, kv_in, params, mask=None):
    """Triple-loop scaled-dot-product oracle in float64."""
    wq, wk, wv, wo = (p.data.astype(np.float64)
                      for p in (params.wq, params.wk, params.wv, params.wo))
    h = params.num_heads
    c = wq.shape[0]
    d = c // h
    q = q_in.astype(np.float64) @ wq
    k = kv_in.astype(np.float64) @ wk
    v = kv_in.astype(np.float64) @ wv
    tq, s = q.shape[0], k.shape[0]
    out = np.zeros((tq, c))
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(tq):
            logits = np.empty(s)
            for j in range(s):
                logits[j] = q[i, sl] @ k[j, sl] / np.sqrt(d)
                if mask is not None:
                    logits[j] += mask[i, j]
            e = np.exp(logits - logits.max())
            w = e / e.sum()
            for j in range(s):
                out[i, sl] += w[j] * v[j, sl]
    return out @ wo


# ---------------------------------------------------------------------------
# window partition / merge

def test_partition_count_8x8_window4():
    grid = A.WindowGrid(8, 8, 3, window=4)
    x = T.Tensor(rng(0).standard_normal((8, 8, 3)).astype(np.float32))
    wins = A.window_partition(x, grid)
    assert wins.shape == (4, 16, 3)  # (H/N) * (W/N) windows


def test_partition_whole_map_is_single_window():
    grid = A.WindowGrid(4, 4, 2, window=4)
    x = T.Tensor(rng(1).standard_normal((4, 4, 2)).astype(np.float32))
    wins = A.window_partition(x, grid)
    assert wins.shape == (1, 16, 2)
    assert np.array_equal(wins.data[0], x.data.reshape(16, 2))


@pytest.mark.parametrize("shift", [0, 2])
def test_partition_merge_roundtrip_bit_exact(shift):
    grid = A.WindowGrid(8, 12, 5, window=4, shift=shift)
    x = T.Tensor(rng(2).standard_normal((8, 12, 5)).astype(np.float32))
    back = A.window_merge(A.window_partition(x, grid), grid)
    assert np.array_equal(back.data, x.data)


def test_partition_rejects_indivisible_dims():
    with pytest.raises(ValueError, match="divisible"):
        A.WindowGrid(6, 8, 3, window=4)


def test_grid_rejects_bad_shift():
    with pytest.raises(ValueError, match="shift"):
        A.WindowGrid(8, 8, 3, window=4, shift=1)


def test_shifted_windows_differ_then_restore():
    grid0 = A.WindowGrid(8, 8, 1, window=4, shift=0)
    grid2 = A.WindowGrid(8, 8, 1, window=4, shift=2)
    x = T.Tensor(np.arange(64, dtype=np.float32).reshape(8, 8, 1))
    w0 = A.window_partition(x, grid0)
    w2 = A.window_partition(x, grid2)
    assert not np.array_equal(w0.data, w2.data)
    assert np.array_equal(A.window_merge(w2, grid2).data, x.data)


# ---------------------------------------------------------------------------
# attention

def test_single_token_attention_weight_is_one():
    c = 6
    params = rand_params(c, 2, seed=3)
    tok = T.Tensor(rng(4).standard_normal((1, c)).astype(np.float32))
    out = A.multi_head_attention(tok, tok, params)
    v = T.matmul(tok, params.wv)
    expected = T.matmul(v, params.wo)
    assert np.allclose(out.data, expected.data, atol=1e-6)


def test_identical_keys_give_mean_value():
    c, s = 4, 5
    params = rand_params(c, 1, seed=5)
    kv = T.Tensor(np.tile(rng(6).standard_normal((1, c)).astype(np.float32), (s, 1)))
    q = T.Tensor(rng(7).standard_normal((3, c)).astype(np.float32))
    out = A.multi_head_attention(q, kv, params)
    mean_v = T.matmul(kv, params.wv).data.mean(axis=0)
    expected = mean_v @ params.wo.data
    assert np.allclose(out.data, np.tile(expected, (3, 1)), atol=1e-5)


def test_matches_naive_oracle_small_case():
    c = 4
    params = rand_params(c, 1, seed=8)
    q = rng(9).standard_normal((3, c)).astype(np.float32)
    out = A.multi_head_attention(T.Tensor(q), T.Tensor(q), params)
    assert np.max(np.abs(out.data - naive_attention(q, q, params))) < 1e-5


def test_matches_naive_oracle_many_random_cases():
    r = rng(10)
    for case in range(50):
        heads = int(r.choice([1, 2, 4]))
        c = heads * int(r.choice([2, 4, 8]))
        tq = int(r.integers(1, 9))
        s = int(r.integers(1, 9))
        params = rand_params(c, heads, seed=100 + case)
        q = r.standard_normal((tq, c)).astype(np.float32)
        kv = r.standard_normal((s, c)).astype(np.float32)
        mask = None
        if s > 1 and case % 3 == 0:
            mask = np.where(r.random((tq, s)) < 0.3, A.MASK_NEG, 0.0).astype(np.float32)
            mask[:, 0] = 0.0  # keep every query row attendable
        out = A.multi_head_attention(T.Tensor(q), T.Tensor(kv), params, mask)
        ref = naive_attention(q, kv, params, mask)
        assert np.max(np.abs(out.data - ref)) < 1e-5


def test_attention_rows_sum_to_one_post_mask():
    r = rng(11)
    for case in range(10):
        c, heads, tq, s = 8, 2, 5, 7
        q = T.Tensor(r.standard_normal((tq, c)).astype(np.float32) * 3)
        kv = T.Tensor(r.standard_normal((s, c)).astype(np.float32) * 3)
        mask = np.where(r.random((tq, s)) < 0.4, A.MASK_NEG, 0.0).astype(np.float32)
        mask[:, -1] = 0.0
        _, weights = A.scaled_dot_attention(q, kv, kv, heads, mask,
                                            return_weights=True)
        assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)
        masked = np.broadcast_to(mask != 0, weights.data.shape)
        assert np.all(weights.data[masked] < 1e-6)


def test_key_value_permutation_equivariance():
    c, heads = 8, 2
    params = rand_params(c, heads, seed=12)
    q = T.Tensor(rng(13).standard_normal((4, c)).astype(np.float32))
    kv = rng(14).standard_normal((6, c)).astype(np.float32)
    perm = rng(15).permutation(6)
    out = A.multi_head_attention(q, T.Tensor(kv), params)
    out_p = A.multi_head_attention(q, T.Tensor(kv[perm]), params)
    assert np.max(np.abs(out.data - out_p.data)) < 1e-5


def test_fully_masked_row_rejected():
    c = 4
    params = rand_params(c, 1, seed=16)
    q = T.Tensor(rng(17).standard_normal((2, c)).astype(np.float32))
    mask = np.zeros((2, 2), np.float32)
    mask[1, :] = A.MASK_NEG
    with pytest.raises(ValueError, match="fully-masked"):
        A.multi_head_attention(q, q, params, mask)


def test_mask_values_validated():
    c = 4
    params = rand_params(c, 1, seed=18)
    q = T.Tensor(rng(19).standard_normal((2, c)).astype(np.float32))
    with pytest.raises(ValueError, match="surrogate"):
        A.multi_head_attention(q, q, params, np.full((2, 2), -5.0, np.float32))


def test_batched_matches_per_window():
    c, heads = 8, 2
    params = rand_params(c, heads, seed=20)
    wins = rng(21).standard_normal((3, 5, c)).astype(np.float32)
    batched = A.multi_head_attention(T.Tensor(wins), T.Tensor(wins), params)
    for b in range(3):
        single = A.multi_head_attention(T.Tensor(wins[b]), T.Tensor(wins[b]), params)
        assert np.max(np.abs(batched.data[b] - single.data)) < 1e-6


# ---------------------------------------------------------------------------
# swin block

def block_params(c, heads, seed, zero_residual=False):
    r = rng(seed)

    def w(shape, scale=0.3):
        return T.Tensor((r.standard_normal(shape) * scale).astype(np.float32))

    def zeros(shape):
        return T.Tensor(np.zeros(shape, np.float32))

    attn = A.AttentionParams(
        wq=w((c, c)), wk=w((c, c)), wv=w((c, c)),
        wo=zeros((c, c)) if zero_residual else w((c, c)),
        num_heads=heads)
    return A.SwinBlockParams(
        ln1_gamma=T.Tensor(np.ones(c, np.float32)), ln1_beta=zeros(c),
        attn=attn,
        ln2_gamma=T.Tensor(np.ones(c, np.float32)), ln2_beta=zeros(c),
        mlp_w1=w((c, 4 * c)), mlp_b1=zeros(4 * c),
        mlp_w2=zeros((4 * c, c)) if zero_residual else w((4 * c, c)),
        mlp_b2=zeros(c))


def test_zeroed_residual_projections_make_identity_block():
    grid = A.WindowGrid(8, 8, 6, window=4, shift=2)
    params = block_params(6, 2, seed=22, zero_residual=True)
    x = T.Tensor(rng(23).standard_normal((8, 8, 6)).astype(np.float32))
    out = A.swin_block(x, params, grid)
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("shape,window,shift", [
    ((8, 8, 4), 4, 0), ((8, 8, 4), 4, 2), ((4, 8, 8), 2, 1), ((4, 4, 4), 4, 0),
])
def test_block_preserves_shape(shape, window, shift):
    grid = A.WindowGrid(shape[0], shape[1], shape[2], window=window, shift=shift)
    params = block_params(shape[2], 2, seed=24)
    x = T.Tensor(rng(25).standard_normal(shape).astype(np.float32))
    assert A.swin_block(x, params, grid).shape == x.shape


def test_shifted_mask_blocks_wrapped_pairs():
    grid = A.WindowGrid(8, 8, 4, window=4, shift=2)
    mask = A.shifted_window_mask(grid)
    assert mask.shape == (4, 16, 16)
    assert np.all(np.diagonal(mask, axis1=1, axis2=2) == 0)
    assert np.all(A.shifted_window_mask(A.WindowGrid(8, 8, 4, window=4)) is None)
    # bottom-right window mixes all four wrapped regions; most pairs masked
    assert (mask[3] == A.MASK_NEG).sum() > 0


def test_swin_block_grad_check():
    grid = A.WindowGrid(4, 4, 8, window=2, shift=1)
    params = block_params(8, 2, seed=26)
    probe = T.Tensor(rng(27).uniform(1.0, 2.0, (4, 4, 8)).astype(np.float32))
    x0 = T.Tensor(rng(28).standard_normal((4, 4, 8)).astype(np.float32))

    def f(x):
        return T.mul(A.swin_block(x, params, grid), probe).sum()

    assert T.grad_check(f, x0, h=1e-2, sample=48, seed=1) < 1e-2

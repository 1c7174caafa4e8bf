import numpy as np
import pytest

from physmv.attention import (
    CrossViewAttention,
    GroupedTemporalAttention,
    PhysicsAttention,
    TextCrossAttention,
    VideoSynAttention,
    scaled_dot_attention,
)
from physmv.geometry import FLOOR_LOGIT, ConfidenceMap, GeometryPrior, geometry_bias, orthogonal_views
from physmv.tensor import ShapeError, Tensor, concat

GRID = (2, 4, 3, 2, 2, 8)


def grid(rng, shape=GRID):
    return Tensor(rng.normal(size=shape))


def open_gate(block, value=1.0):
    block.alpha.data = np.array([value])
    return block


def test_scaled_dot_examples(rng):
    q, k, v = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    assert np.array_equal(scaled_dot_attention(q, k, v, np.zeros((3, 3))).data, scaled_dot_attention(q, k, v).data)
    one = scaled_dot_attention(q, Tensor(rng.normal(size=(1, 4))), Tensor([[1.0, 2.0, 3.0, 4.0]]), np.array([[5.0]] * 3))
    assert np.allclose(one.data, [[1, 2, 3, 4]] * 3)


def test_scaled_dot_hand_logits():
    # q.k / sqrt(1) with q = 1 gives logits (0, 1, 2)
    q = Tensor([[1.0]])
    k = Tensor([[0.0], [1.0], [2.0]])
    v = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    w = np.exp([0.0, 1.0, 2.0]) / np.exp([0.0, 1.0, 2.0]).sum()
    assert np.allclose(scaled_dot_attention(q, k, v).data[0], w @ v.data)
    with pytest.raises(ShapeError):
        scaled_dot_attention(q, k, v, np.zeros((2, 3)))


def test_physics_identity_at_zero_gate(rng):
    H = grid(rng)
    assert np.array_equal(PhysicsAttention(8, 2, rng)(H, grid(rng, (5, 8))).data, H.data)


def test_physics_duplicated_tokens_match_log2_reweighting(rng):
    block = open_gate(PhysicsAttention(8, 2, rng))
    H = grid(rng)
    tokens = Tensor(rng.normal(size=(5, 8)))
    doubled = block(H, concat([tokens, tokens], axis=0)).data
    B, V, T, h, w, C = GRID
    x = Tensor(H.data.reshape(B, V, T * h * w, C))
    ctx = concat([x, Tensor(np.broadcast_to(tokens.data, (B, V, 5, C)).copy())], axis=-2)
    n = T * h * w
    bias = np.zeros((n, n + 5))
    bias[:, n:] = np.log(2.0)
    expected = x.data + block.attn(x, ctx, bias).data
    assert np.allclose(doubled, expected.reshape(GRID), atol=1e-12)


def test_physics_token_sensitivity(rng):
    from physmv.conditioning import PhysicsAttributes, physics_tokenize

    block = open_gate(PhysicsAttention(48, 2, rng))
    H = grid(rng, (1, 4, 1, 2, 2, 48))
    a = physics_tokenize(PhysicsAttributes((0, -9.8, 0), (0, 0, 0), 1e3, 1e5, 0.3))
    b = physics_tokenize(PhysicsAttributes((0, -9.8, 0), (0, 0, 0), 1e3, 1e6, 0.3))
    assert np.abs(block(H, Tensor(a)).data - block(H, Tensor(b)).data).max() > 0


def test_text_examples(rng):
    H = grid(rng)
    block = TextCrossAttention(8, 2, rng)
    prompt = Tensor(rng.normal(size=(2, 4, 8)))
    assert np.array_equal(block(H, prompt).data, H.data)
    open_gate(block, 0.5)
    single = Tensor(rng.normal(size=(2, 1, 8)))
    value = block.attn.wo.data.T @ (block.attn.wv.data.T @ single.data[:, 0].T)  # (C, B)
    out = block(H, single).data
    for b in range(2):
        assert np.allclose(out[b] - H.data[b], 0.5 * value[:, b], atol=1e-12)
    perm = Tensor(prompt.data[:, ::-1].copy())
    assert np.allclose(block(H, prompt).data, block(H, perm).data, atol=1e-12)


def test_text_mask_hides_padding(rng):
    block = open_gate(TextCrossAttention(8, 2, rng))
    H = grid(rng)
    prompt = rng.normal(size=(2, 4, 8))
    mask = np.array([[True, True, False, False], [True, True, True, True]])
    changed = prompt.copy()
    changed[0, 2:] = 99.0
    a = block(H, Tensor(prompt), mask).data
    b = block(H, Tensor(changed), mask).data
    assert np.allclose(a, b, atol=1e-12)


def test_cross_view_symmetric_content(rng):
    block = open_gate(CrossViewAttention(8, 2, rng))
    one = rng.normal(size=(2, 1, 3, 2, 2, 8))
    H = Tensor(np.repeat(one, 4, axis=1))
    out = block(H, np.zeros((16, 16))).data
    for v in range(1, 4):
        assert np.allclose(out[:, v], out[:, 0], atol=1e-12)


def test_cross_view_floor_reduces_to_per_view(rng):
    block = open_gate(CrossViewAttention(8, 2, rng))
    H = grid(rng)
    n = 4
    same = np.kron(np.eye(4), np.ones((n, n)))
    out = block(H, np.where(same > 0, 0.0, FLOOR_LOGIT)).data
    B, V, T, h, w, C = GRID
    for v in range(V):
        x = Tensor(H.data[:, v].reshape(B, T, h * w, C))
        ref = x.data + block.attn(x, x).data
        assert np.abs(out[:, v].reshape(B, T, h * w, C) - ref).max() < 1e-4


def test_cross_view_large_tau_is_unbiased_for_flat_depth(rng):
    block = open_gate(CrossViewAttention(8, 2, rng))
    H = grid(rng)
    D = np.broadcast_to(rng.uniform(1.5, 2.5, size=(2, 3, 4, 1, 1)), (2, 3, 4, 2, 2)).copy()
    bias = geometry_bias(Tensor(D), orthogonal_views(2, 2), GeometryPrior(tau=1e9), ConfidenceMap())
    assert np.abs(block(H, bias).data - block(H).data).max() < 1e-5


def test_cross_view_rejects_partial_bias(rng):
    with pytest.raises(ShapeError):
        open_gate(CrossViewAttention(8, 2, rng))(grid(rng), np.zeros((4, 4)))


def test_temporal_examples(rng):
    H = grid(rng)
    assert np.array_equal(GroupedTemporalAttention(8, rng)(H).data, H.data)
    single = grid(rng, (2, 4, 1, 2, 2, 8))
    fresh = open_gate(GroupedTemporalAttention(8, rng, zero_init=True), 3.0)
    assert np.array_equal(fresh(single).data, single.data)
    with pytest.raises(ShapeError):
        GroupedTemporalAttention(6, rng)


def test_temporal_groups_are_disjoint(rng):
    block = open_gate(GroupedTemporalAttention(8, rng))
    H = grid(rng)
    before = block(H).data
    for p in block.groups[2].parameters():
        p.data = np.zeros_like(p.data)
    after = block(H).data
    for g in (0, 1, 3):
        assert np.array_equal(before[..., 2 * g : 2 * g + 2], after[..., 2 * g : 2 * g + 2])
    assert not np.array_equal(before[..., 4:6], after[..., 4:6])


def test_temporal_mixes_only_along_time(rng):
    block = open_gate(GroupedTemporalAttention(8, rng))
    H = rng.normal(size=GRID)
    poked = H.copy()
    poked[0, 1, 0, 0, 0] += 1.0
    diff = np.abs(block(Tensor(poked)).data - block(Tensor(H)).data).sum(axis=-1)
    changed = np.argwhere(diff > 0)
    assert all(tuple(c[[0, 1, 3, 4]]) == (0, 1, 0, 0) for c in changed)


def test_videosyn_zero_flow_matches_plain_attention(rng):
    block = open_gate(VideoSynAttention(8, 4, 2, rng))
    H = grid(rng, (2, 3, 2, 2, 8))
    prompt = Tensor(rng.normal(size=(2, 3, 8)))
    out = block(H, Tensor(np.zeros((2, 3, 2, 2, 4))), prompt).data
    x = Tensor(H.data.reshape(2, 12, 8))
    ref = x.data + block.attn(x, concat([x, prompt], axis=-2)).data
    assert np.allclose(out, ref.reshape(H.shape), atol=1e-14)
    # a fresh flow projection ignores even non-zero flow
    moving = block(H, Tensor(rng.normal(size=(2, 3, 2, 2, 4))), prompt).data
    assert np.array_equal(moving, out)


def test_videosyn_deterministic_and_permutation_invariant(rng):
    block = open_gate(VideoSynAttention(8, 4, 2, rng))
    block.flow_proj.data = rng.normal(size=(4, 8))
    H = grid(rng, (1, 2, 2, 2, 8))
    flow = Tensor(rng.normal(size=(1, 2, 2, 2, 4)))
    prompt = rng.normal(size=(1, 4, 8))
    a = block(H, flow, Tensor(prompt)).data
    assert np.array_equal(a, block(H, flow, Tensor(prompt)).data)
    assert np.allclose(a, block(H, flow, Tensor(prompt[:, [2, 0, 3, 1]])).data, atol=1e-12)
    with pytest.raises(ShapeError):
        block(H, Tensor(np.zeros((1, 2, 2, 3, 4))), Tensor(prompt))

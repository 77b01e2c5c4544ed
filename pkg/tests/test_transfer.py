import math

import numpy as np
import pytest
import torch

from internet.errors import ShapeMismatch
from internet.transfer import (
    GeneratorConfig, ModalityTransfer, SwinBlock, relative_position_index, shift_mask, transfer,
    window_attention, window_partition, window_reverse,
)

SMALL = GeneratorConfig(base_channels=4, window_size=2, heads=(1, 1, 2, 2, 4), mlp_ratio=2.0, bottleneck_depth=2)


def test_attention_single_token():
    x = torch.randn(1, 1, 1)
    assert torch.equal(window_attention(x, x, x), x)


def test_attention_equal_keys_gives_mean():
    q = torch.randn(4, 3)
    k = torch.ones(4, 3)
    v = torch.randn(4, 5)
    assert torch.allclose(window_attention(q, k, v), v.mean(0).expand(4, 5), atol=1e-6)


def test_attention_loop_oracle(rng):
    q, k, v = (rng.normal(size=(4, 2)) for _ in range(3))
    bias = rng.normal(size=(4, 4))
    out = window_attention(*(torch.from_numpy(t) for t in (q, k, v)), torch.from_numpy(bias)).numpy()
    for i in range(4):
        logits = [float(np.dot(q[i], k[j])) / math.sqrt(2) + bias[i, j] for j in range(4)]
        w = np.exp(np.array(logits) - max(logits))
        w /= w.sum()
        assert np.allclose(out[i], sum(w[j] * v[j] for j in range(4)), atol=1e-12)


def test_partition_roundtrip():
    x = torch.randn(2, 8, 12, 5)
    w = window_partition(x, 4)
    assert w.shape == (2 * 2 * 3, 16, 5)
    assert torch.equal(window_partition(x, 4)[1].reshape(4, 4, 5), x[0, :4, 4:8])
    assert torch.equal(window_reverse(w, 4, 2, 8, 12), x)


def test_relative_position_index():
    idx = relative_position_index(2)
    # tokens (0,0),(0,1),(1,0),(1,1); the diagonal is offset (0,0) = centre of the 3x3 table
    assert idx.diagonal().tolist() == [4, 4, 4, 4]
    assert idx[0, 3] == 0 and idx[3, 0] == 8
    assert idx.max() == 8


def test_shift_mask_blocks_wrapped_regions():
    m = shift_mask(4, 4, 2, 1)
    assert m.shape == (4, 4, 4)
    assert (m[0] == 0).all()  # top-left window holds one region only
    assert set(m[3].unique().tolist()) == {0.0, -100.0}


def test_block_preserves_shape_and_shifts():
    blk = SwinBlock(8, 2, 4, 2)
    x = torch.randn(1, 8, 8, 8)
    assert blk(x).shape == x.shape
    with pytest.raises(ShapeMismatch):
        blk(torch.randn(1, 6, 8, 8))


def test_generator_shapes():
    torch.manual_seed(0)
    g = ModalityTransfer(SMALL)
    x = torch.rand(2, 3, 32, 32)
    y = transfer(g, x)
    assert y.shape == x.shape
    c = SMALL.base_channels
    assert g.stage_shapes == [
        (2 * c, 16, 16), (4 * c, 8, 8), (8 * c, 4, 4), (16 * c, 2, 2), (16 * c, 2, 2),
        (8 * c, 4, 4), (4 * c, 8, 8), (2 * c, 16, 16), (c, 32, 32),
    ]
    assert torch.equal(g(x), y)


def test_default_generator_on_128():
    g = ModalityTransfer(GeneratorConfig(base_channels=8, heads=(1, 1, 2, 2, 4)))
    assert g(torch.rand(1, 3, 128, 128)).shape == (1, 3, 128, 128)


def test_generator_rejects_bad_sizes():
    g = ModalityTransfer(SMALL)
    with pytest.raises(ShapeMismatch):
        g(torch.rand(1, 3, 24, 32))
    with pytest.raises(ShapeMismatch):
        g(torch.rand(1, 1, 32, 32))
    with pytest.raises(ShapeMismatch):
        GeneratorConfig(base_channels=6, heads=(4, 1, 1, 1, 1))


def test_generator_gradients():
    torch.manual_seed(0)
    g = ModalityTransfer(SMALL)
    g(torch.rand(1, 3, 32, 32)).square().mean().backward()
    assert all(p.grad is not None for p in g.parameters())

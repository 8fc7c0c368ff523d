#!/usr/bin/env python3
"""
Tests for chunk masks, the training chunk sampler and conformer streaming caches
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from core.errors import ShapeError
from models.conformer import (TRAINING_MAX_CHUNK, ConformerBlock, ConformerConfig, ConformerStack, LayerCache,
                              make_chunk_mask, sample_training_chunk)


def oracle_mask(num_frames: int, chunk: int, left=None) -> np.ndarray:
    allowed = np.zeros((num_frames, num_frames), dtype=bool)
    for i in range(num_frames):
        for j in range(num_frames):
            if chunk == 0:
                allowed[i, j] = True
                continue
            start = (i // chunk) * chunk
            allowed[i, j] = j < start + chunk and (left is None or j >= start - left)
    return allowed


def small_stack(max_history: int = 64, seed: int = 0) -> ConformerStack:
    torch.manual_seed(seed)
    cfg = ConformerConfig(num_blocks=2, dim=8, heads=2, conv_kernel=3, max_history=max_history)
    return ConformerStack(cfg).eval()


def stream(stack: ConformerStack, x: torch.Tensor, chunk: int) -> torch.Tensor:
    caches = stack.new_caches()
    outputs = []
    with torch.no_grad():
        for start in range(0, x.size(0), chunk):
            out, caches = stack.forward_streaming(x[start:start + chunk], caches)
            outputs.append(out)
    return torch.cat(outputs)


def test_mask_matches_oracle_exhaustively():
    for num_frames in range(1, 17):
        for chunk in range(0, TRAINING_MAX_CHUNK + 1):
            mask = make_chunk_mask(num_frames, chunk)
            assert np.array_equal(mask.matrix.numpy(), oracle_mask(num_frames, chunk)), (num_frames, chunk)


def test_left_bounded_mask_matches_oracle():
    for num_frames in (5, 12, 16):
        for chunk in (1, 2, 3, 4):
            for left in (0, 2, 5):
                mask = make_chunk_mask(num_frames, chunk, left)
                assert np.array_equal(mask.matrix.numpy(), oracle_mask(num_frames, chunk, left))


def test_mask_examples():
    assert make_chunk_mask(4, 2).allows(0, 1)
    assert not make_chunk_mask(4, 2).allows(1, 2)
    assert make_chunk_mask(4, 2).allows(3, 0)
    assert bool(make_chunk_mask(3, 0).matrix.all())
    # chunk larger than the sequence sees everything
    assert bool(make_chunk_mask(5, 8).matrix.all())
    with pytest.raises(ValueError):
        make_chunk_mask(0, 2)
    with pytest.raises(ValueError):
        make_chunk_mask(4, -1)


def test_chunk_sampler_distribution():
    rng = np.random.default_rng(0)
    draws = 10_000
    counts = np.bincount([sample_training_chunk(rng) for _ in range(draws)], minlength=TRAINING_MAX_CHUNK + 1)
    assert counts.size == TRAINING_MAX_CHUNK + 1
    assert abs(counts[0] / draws - 0.5) <= 0.02
    expected = np.array([0.5] + [0.5 / TRAINING_MAX_CHUNK] * TRAINING_MAX_CHUNK) * draws
    assert chisquare(counts, expected).pvalue >= 0.01


@pytest.mark.parametrize("chunk", [1, 2, 3, 4])
def test_streaming_matches_masked_forward(chunk):
    stack = small_stack()
    x = torch.randn(17, 8, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        offline, _ = stack(x, make_chunk_mask(17, chunk))
    assert torch.allclose(stream(stack, x, chunk), offline, atol=1e-5)


@pytest.mark.parametrize("chunk", [1, 2, 3])
def test_block_jacobian_follows_the_chunk_mask(chunk):
    torch.manual_seed(0)
    block = ConformerBlock(ConformerConfig(num_blocks=1, dim=8, heads=2, conv_kernel=3)).double().eval()
    x = torch.randn(9, 8, dtype=torch.float64)
    mask = make_chunk_mask(9, chunk)
    jacobian = torch.autograd.functional.jacobian(lambda inp: block(inp, mask), x)
    # influence[i, j]: how much input frame j moves output frame i
    influence = jacobian.abs().sum(dim=(1, 3)).numpy()
    allowed = oracle_mask(9, chunk)
    assert (influence[~allowed] == 0).all()
    assert (influence[allowed] > 0).all()


def test_streaming_with_history_bound_matches_left_bounded_mask():
    stack = small_stack(max_history=4)
    x = torch.randn(20, 8, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        offline, _ = stack(x, make_chunk_mask(20, 2, left_frames=4))
        unbounded, _ = stack(x, make_chunk_mask(20, 2))
    streamed = stream(stack, x, 2)
    assert torch.allclose(streamed, offline, atol=1e-5)
    assert not torch.allclose(streamed, unbounded, atol=1e-5)


def test_cache_keeps_at_most_max_history_frames():
    stack = small_stack(max_history=4)
    caches = stack.new_caches()
    with torch.no_grad():
        for _ in range(5):
            _, caches = stack.forward_streaming(torch.randn(3, 8), caches)
    assert all(cache.history == 4 for cache in caches)
    assert all(cache.frames == 15 for cache in caches)
    assert all(cache.conv.shape == (2, 8) for cache in caches)


def test_lookahead_rows_are_not_committed():
    stack = small_stack()
    chunk = torch.randn(2, 8)
    extra = torch.randn(3, 8)
    with torch.no_grad():
        _, plain = stack.forward_streaming(chunk, stack.new_caches())
        out, extended = stack.forward_streaming(torch.cat([chunk, extra]), stack.new_caches(), lookahead=3)
    assert out.shape == (5, 8)
    for a, b in zip(plain, extended):
        assert a.frames == b.frames == 2
        assert a.history == b.history == 2
        assert a.conv.shape == b.conv.shape
    # first-block projections are per row, so only the committed rows are cached there
    assert torch.allclose(plain[0].keys, extended[0].keys)
    assert torch.allclose(plain[0].values, extended[0].values)


def test_block_shape_errors():
    block = small_stack().blocks[0]
    with pytest.raises(ShapeError):
        block(torch.zeros(4, 7), make_chunk_mask(4, 0))
    with pytest.raises(ShapeError):
        block(torch.zeros(4, 8), make_chunk_mask(5, 0))
    with pytest.raises(ShapeError):
        block.forward_streaming(torch.zeros(2, 8), LayerCache.empty(block.cfg), lookahead=2)


def test_stack_returns_middle_block_output():
    stack = small_stack()
    x = torch.randn(6, 8)
    mask = make_chunk_mask(6, 0)
    with torch.no_grad():
        out, middle = stack(x, mask)
        first = stack.blocks[0](x, mask)
    assert torch.allclose(middle, first)
    assert out.shape == (6, 8)


def test_config_validation():
    with pytest.raises(ValueError):
        ConformerConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        ConformerConfig(conv_kernel=4)
    assert isinstance(ConformerBlock(ConformerConfig(dim=8, heads=2)), torch.nn.Module)

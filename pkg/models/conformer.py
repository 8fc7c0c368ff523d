"""
Conformer blocks with dynamic chunk masks and streaming caches

One set of weights serves both modes: full-sequence (chunk_size 0) and chunked
streaming, where each frame sees its own chunk plus every earlier frame.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import ShapeError
from core.functional import quiet_softmax

TRAINING_MAX_CHUNK = 8


@dataclass
class ConformerConfig:
    num_blocks: int = 4
    dim: int = 64
    heads: int = 4
    conv_kernel: int = 7
    ffn_expansion: int = 2
    max_history: int = 64

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.num_blocks < 1:
            raise ValueError("a conformer stack needs at least one block")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class ChunkMask:
    """Boolean T_m x T_m attention mask; entry (i, j) means frame i may attend to frame j"""
    matrix: torch.Tensor
    chunk_size: int
    left_frames: Optional[int] = None

    @property
    def size(self) -> int:
        return self.matrix.size(0)

    def allows(self, i: int, j: int) -> bool:
        return bool(self.matrix[i, j])


def make_chunk_mask(num_frames: int, chunk_size: int, left_frames: Optional[int] = None) -> ChunkMask:
    """Dynamic chunk mask.

    chunk_size 0 gives the all-true full-sequence mask. For c > 0, frame i sees
    frames j <= (i // c + 1) * c - 1. left_frames, when set, also drops frames
    more than left_frames before the start of i's chunk; this is what the
    streaming caches do once they hold max_history frames.
    """
    if num_frames < 1 or chunk_size < 0:
        raise ValueError(f"bad mask request T_m={num_frames}, chunk_size={chunk_size}")
    if chunk_size == 0:
        # full mode keeps unbounded history
        return ChunkMask(torch.ones(num_frames, num_frames, dtype=torch.bool), 0, None)

    frames = torch.arange(num_frames)
    chunk_start = (frames // chunk_size) * chunk_size
    matrix = frames.unsqueeze(0) < (chunk_start + chunk_size).unsqueeze(1)
    if left_frames is not None:
        matrix &= frames.unsqueeze(0) >= (chunk_start - left_frames).unsqueeze(1)
    return ChunkMask(matrix, chunk_size, left_frames)


def sample_training_chunk(rng: np.random.Generator) -> int:
    """0 (full sequence) half of the time, otherwise uniform in 1..8 frames"""
    if rng.random() < 0.5:
        return 0
    return int(rng.integers(1, TRAINING_MAX_CHUNK + 1))


@dataclass(frozen=True)
class LayerCache:
    """Streaming state of one conformer block.

    keys/values: (heads, history, head_dim) projections of past frames, at most
    max_history of them. conv: (conv_kernel - 1, dim) left context of the
    depthwise convolution. frames: total frames committed so far.
    """
    keys: torch.Tensor
    values: torch.Tensor
    conv: torch.Tensor
    frames: int = 0

    @classmethod
    def empty(cls, cfg: ConformerConfig, dtype=torch.float32) -> "LayerCache":
        kv = torch.zeros(cfg.heads, 0, cfg.head_dim, dtype=dtype)
        return cls(kv, kv.clone(), torch.zeros(cfg.conv_kernel - 1, cfg.dim, dtype=dtype), 0)

    @property
    def history(self) -> int:
        return self.keys.size(1)


def _feed_forward(dim: int, expansion: int) -> nn.Sequential:
    return nn.Sequential(
        nn.LayerNorm(dim),
        nn.Linear(dim, dim * expansion),
        nn.SiLU(),
        nn.Linear(dim * expansion, dim),
    )


class ConformerBlock(nn.Module):
    """half-FFN -> masked quiet self-attention -> causal conv -> half-FFN -> LayerNorm"""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.ffn1 = _feed_forward(d, cfg.ffn_expansion)
        self.attn_norm = nn.LayerNorm(d)
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.attn_out = nn.Linear(d, d)
        self.conv_norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Linear(d, 2 * d)
        # depthwise weight laid out (dim, 1, kernel) for F.conv1d with groups=dim
        self.depthwise = nn.Conv1d(d, d, cfg.conv_kernel, groups=d)
        self.depthwise_norm = nn.LayerNorm(d)
        self.pointwise_out = nn.Linear(d, d)
        self.ffn2 = _feed_forward(d, cfg.ffn_expansion)
        self.final_norm = nn.LayerNorm(d)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        # (T, D) -> (H, T, dh)
        return x.view(x.size(0), self.cfg.heads, self.cfg.head_dim).transpose(0, 1)

    def _attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                mask: Optional[torch.Tensor]) -> torch.Tensor:
        scores = q @ k.transpose(1, 2) / math.sqrt(self.cfg.head_dim)
        weights = quiet_softmax(scores, mask)
        context = weights @ v
        return self.attn_out(context.transpose(0, 1).reshape(q.size(1), self.cfg.dim))

    def _conv_input(self, x: torch.Tensor) -> torch.Tensor:
        return F.glu(self.pointwise_in(self.conv_norm(x)), dim=-1)

    def _conv_output(self, padded: torch.Tensor) -> torch.Tensor:
        # padded: (k - 1 + T, D) with causal left context already in place
        out = self.depthwise(padded.t().unsqueeze(0)).squeeze(0).t()
        return self.pointwise_out(F.silu(self.depthwise_norm(out)))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 2 or x.size(1) != self.cfg.dim:
            raise ShapeError(f"conformer block expects (T, {self.cfg.dim}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, mask: ChunkMask) -> torch.Tensor:
        """Full-sequence forward of a (T_m, D) input under a chunk mask"""
        self._check_input(x)
        if mask.size != x.size(0):
            raise ShapeError(f"mask is {mask.size}x{mask.size} but input has {x.size(0)} frames")

        x = x + 0.5 * self.ffn1(x)
        h = self.attn_norm(x)
        q, k, v = (self._split_heads(proj(h)) for proj in (self.query, self.key, self.value))
        x = x + self._attend(q, k, v, mask.matrix)

        g = self._conv_input(x)
        left = g.new_zeros(self.cfg.conv_kernel - 1, self.cfg.dim)
        x = x + self._conv_output(torch.cat([left, g], dim=0))

        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)

    def forward_streaming(self, chunk: torch.Tensor, cache: LayerCache,
                          lookahead: int = 0) -> Tuple[torch.Tensor, LayerCache]:
        """Process one chunk against the cached history.

        Every row of the chunk sees the whole chunk plus the cached history.
        The last `lookahead` rows are evaluated but not committed to the
        returned cache, so predicted frames never become history.
        """
        self._check_input(chunk)
        width = chunk.size(0) - lookahead
        if width < 1 or lookahead < 0:
            raise ShapeError(f"chunk of {chunk.size(0)} rows cannot carry {lookahead} lookahead rows")
        if cache.keys.size(2) != self.cfg.head_dim or cache.conv.size(0) != self.cfg.conv_kernel - 1:
            raise ShapeError("layer cache does not belong to this block")

        x = chunk + 0.5 * self.ffn1(chunk)
        h = self.attn_norm(x)
        q, k, v = (self._split_heads(proj(h)) for proj in (self.query, self.key, self.value))
        keys = torch.cat([cache.keys, k], dim=1)
        values = torch.cat([cache.values, v], dim=1)
        x = x + self._attend(q, keys, values, None)

        g = self._conv_input(x)
        padded = torch.cat([cache.conv, g], dim=0)
        x = x + self._conv_output(padded)

        x = x + 0.5 * self.ffn2(x)
        out = self.final_norm(x)

        keep = cache.history + width
        start = max(keep - self.cfg.max_history, 0)
        context = self.cfg.conv_kernel - 1
        conv_end = context + width
        new_cache = LayerCache(
            keys=keys[:, start:keep].detach(),
            values=values[:, start:keep].detach(),
            conv=padded[conv_end - context:conv_end].detach(),
            frames=cache.frames + width,
        )
        return out, new_cache


class ConformerStack(nn.Module):
    """Stack of conformer blocks sharing one chunk mask"""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_blocks))

    @property
    def middle_index(self) -> int:
        return max(self.cfg.num_blocks // 2 - 1, 0)

    def forward(self, x: torch.Tensor, mask: ChunkMask) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (output, output of the middle block)"""
        middle = x
        for i, block in enumerate(self.blocks):
            x = block(x, mask)
            if i == self.middle_index:
                middle = x
        return x, middle

    def new_caches(self, dtype=torch.float32) -> List[LayerCache]:
        return [LayerCache.empty(self.cfg, dtype) for _ in self.blocks]

    def forward_streaming(self, chunk: torch.Tensor, caches: List[LayerCache],
                          lookahead: int = 0) -> Tuple[torch.Tensor, List[LayerCache]]:
        if len(caches) != len(self.blocks):
            raise ShapeError(f"expected {len(self.blocks)} layer caches, got {len(caches)}")
        new_caches = []
        for block, cache in zip(self.blocks, caches):
            chunk, cache = block.forward_streaming(chunk, cache, lookahead)
            new_caches.append(cache)
        return chunk, new_caches

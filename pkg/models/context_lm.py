"""
Decoder-only language model over discrete bottleneck codes

Predicts pseudo future context for the decoder. Token ids are the 1-based code
ids; id 0 is BOS. Layers follow the LLaMA layout (RMSNorm, SwiGLU, no biases)
with quiet-softmax attention and learned absolute positions.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import ShapeError, VocabularyError
from core.functional import quiet_softmax

BOS = 0


@dataclass
class LmConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    intermediate: int = 128
    vocab: int = 17
    max_context: int = 256

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def num_codes(self) -> int:
        return self.vocab - 1

    @classmethod
    def preset(cls, name: str, num_codes: int, max_context: int = 256) -> "LmConfig":
        if name == "tiny":
            return cls(layers=2, heads=2, hidden=8, intermediate=16, vocab=num_codes + 1, max_context=max_context)
        if name == "toy":
            return cls(layers=2, heads=4, hidden=64, intermediate=128, vocab=num_codes + 1, max_context=max_context)
        if name in ("large", "paper"):
            return cls(layers=4, heads=8, hidden=512, intermediate=1024, vocab=num_codes + 1, max_context=max_context)
        raise ValueError(f"unknown LM preset '{name}'")


@dataclass(frozen=True)
class LmState:
    """Per-layer key/value caches; position equals the cached length"""
    keys: Tuple[torch.Tensor, ...]
    values: Tuple[torch.Tensor, ...]
    position: int
    last_logits: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "top_k"
    k: int = 10
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "top_k"):
            raise ValueError(f"sampling mode must be greedy or top_k, got '{self.mode}'")
        if self.k < 1 or not self.temperature > 0:
            raise ValueError("sampling needs k >= 1 and a positive temperature")


@dataclass
class PseudoContext:
    codes: torch.Tensor          # (n,) 1-based codes
    log_probs: torch.Tensor      # (n,) log-probability of each drawn code given its prefix

    @property
    def frames(self) -> int:
        return self.codes.numel()


class LmLayer(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.attn_norm = nn.RMSNorm(cfg.hidden)
        self.query = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.key = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.value = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.attn_out = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.mlp_norm = nn.RMSNorm(cfg.hidden)
        self.gate = nn.Linear(cfg.hidden, cfg.intermediate, bias=False)
        self.up = nn.Linear(cfg.hidden, cfg.intermediate, bias=False)
        self.down = nn.Linear(cfg.intermediate, cfg.hidden, bias=False)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(x.size(0), self.cfg.heads, self.cfg.head_dim).transpose(0, 1)

    def forward(self, x: torch.Tensor, past_k: torch.Tensor, past_v: torch.Tensor):
        h = self.attn_norm(x)
        q, k, v = self._heads(self.query(h)), self._heads(self.key(h)), self._heads(self.value(h))
        keys = torch.cat([past_k, k], dim=1)
        values = torch.cat([past_v, v], dim=1)

        past = past_k.size(1)
        new = x.size(0)
        # row i (absolute position past + i) sees keys 0..past + i
        mask = torch.arange(past + new).unsqueeze(0) <= (past + torch.arange(new)).unsqueeze(1)
        scores = q @ keys.transpose(1, 2) / math.sqrt(self.cfg.head_dim)
        context = quiet_softmax(scores, mask) @ values
        x = x + self.attn_out(context.transpose(0, 1).reshape(new, self.cfg.hidden))

        h = self.mlp_norm(x)
        x = x + self.down(F.silu(self.gate(h)) * self.up(h))
        return x, keys, values


class ContextLM(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab, cfg.hidden)
        self.position_embed = nn.Embedding(cfg.max_context, cfg.hidden)
        self.layers = nn.ModuleList(LmLayer(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.RMSNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.vocab, bias=False)
        # uniform predictions until trained
        nn.init.zeros_(self.head.weight)

    def empty_state(self, dtype=torch.float32) -> LmState:
        empty = torch.zeros(self.cfg.heads, 0, self.cfg.head_dim, dtype=dtype)
        return LmState(keys=tuple(empty for _ in self.layers), values=tuple(empty for _ in self.layers),
                       position=0)

    def lm_forward(self, tokens: torch.Tensor, state: Optional[LmState] = None) -> Tuple[torch.Tensor, LmState]:
        """Logits for every new position, plus the advanced state.

        Strictly causal: logits at position i depend on tokens <= i only.
        Calling with a state is equivalent to a fresh call on the full prefix.
        """
        if tokens.dim() != 1 or tokens.numel() == 0:
            raise ShapeError(f"lm_forward expects a non-empty 1-D token sequence, got {tuple(tokens.shape)}")
        if bool(((tokens < 0) | (tokens >= self.cfg.vocab)).any()):
            raise VocabularyError(f"LM tokens must lie in 0..{self.cfg.vocab - 1}")
        state = state or self.empty_state(self.token_embed.weight.dtype)
        end = state.position + tokens.numel()
        if end > self.cfg.max_context:
            raise ShapeError(f"context of {end} tokens exceeds max_context {self.cfg.max_context}")

        positions = torch.arange(state.position, end)
        x = self.token_embed(tokens.long()) + self.position_embed(positions)
        keys, values = [], []
        for layer, past_k, past_v in zip(self.layers, state.keys, state.values):
            x, k, v = layer(x, past_k, past_v)
            keys.append(k)
            values.append(v)
        logits = self.head(self.final_norm(x))
        new_state = LmState(tuple(keys), tuple(values), end, logits[-1].detach())
        return logits, new_state

    def lm_nll(self, sequence: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
        """Negative log-likelihood of sequence[1:] given its prefixes (sequence starts with BOS)"""
        if sequence.numel() < 2:
            raise ShapeError("lm_nll needs a BOS-prefixed sequence of length >= 2")
        logits, _ = self.lm_forward(sequence[:-1])
        return F.cross_entropy(logits, sequence[1:].long(), reduction=reduction)

    def prime(self, history: torch.Tensor) -> LmState:
        """State after reading BOS followed by the history codes"""
        prefix = torch.cat([torch.tensor([BOS], dtype=torch.long), history.long().view(-1)])
        _, state = self.lm_forward(prefix)
        return state

    def _choose(self, logits: torch.Tensor, cfg: SamplingConfig, generator: torch.Generator) -> int:
        logits = logits.clone()
        logits[BOS] = float("-inf")
        if cfg.mode == "greedy":
            return int(logits.argmax())
        top = torch.topk(logits / cfg.temperature, min(cfg.k, self.cfg.num_codes))
        probs = F.softmax(top.values, dim=-1)
        pick = torch.multinomial(probs, 1, generator=generator)
        return int(top.indices[pick])

    def generate_pseudo_context(self, history: torch.Tensor, n: int, cfg: SamplingConfig,
                                state: Optional[LmState] = None,
                                generator: Optional[torch.Generator] = None) -> PseudoContext:
        """Draw n codes autoregressively after history.

        Each code is conditioned on the history plus the codes drawn before it.
        Without a state only the most recent max_context - 1 - n history codes
        are read. A state, when given, must already hold BOS + history and is
        not modified. Generation never emits BOS.
        """
        if n < 0:
            raise ValueError(f"pseudo context length must be >= 0, got {n}")
        if n == 0:
            return PseudoContext(torch.zeros(0, dtype=torch.long), torch.zeros(0))
        if state is None:
            keep = max(self.cfg.max_context - 1 - n, 0)
            history = history.view(-1)
            state = self.prime(history[history.numel() - keep:] if history.numel() > keep else history)
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)

        codes: List[int] = []
        log_probs: List[torch.Tensor] = []
        logits = state.last_logits
        for step in range(n):
            code = self._choose(logits, cfg, generator)
            log_probs.append(F.log_softmax(logits, dim=-1)[code])
            codes.append(code)
            if step + 1 < n:
                step_logits, state = self.lm_forward(torch.tensor([code]), state)
                logits = step_logits[-1]
        return PseudoContext(torch.tensor(codes, dtype=torch.long), torch.stack(log_probs).detach())

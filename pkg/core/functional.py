"""
Functional ops used by every network in the package
Quiet attention normalizer, Gumbel-Softmax bottleneck sampling and the losses
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from core.errors import NonFiniteError, ShapeError, VocabularyError


@dataclass(frozen=True)
class GumbelConfig:
    """Sampling settings for the discrete bottleneck"""
    temperature: float = 1.0
    hard: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Gumbel temperature must be positive, got {self.temperature}")


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    """Raise NonFiniteError if the tensor holds NaN or inf"""
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return tensor


def quiet_softmax(logits: torch.Tensor, mask: Optional[torch.Tensor] = None, dim: int = -1) -> torch.Tensor:
    """Softmax with an extra unit in the denominator ("softmax plus one").

    out_i = exp(x_i - m) / (exp(-m) + sum_j exp(x_j - m)) over unmasked j.
    Masked entries are 0 and a fully masked row is all zeros, so a query can
    attend to nothing. The shift m is max(0, max unmasked logit); the value is
    independent of m, and flooring it at 0 keeps exp(-m) from overflowing.
    """
    check_finite(logits, "quiet_softmax logits")
    if mask is not None:
        if mask.shape[-1] != logits.shape[-1]:
            raise ShapeError(f"mask length {mask.shape[-1]} != logits length {logits.shape[-1]}")
        logits = logits.masked_fill(~mask, float("-inf"))

    shift = logits.detach().amax(dim=dim, keepdim=True).clamp(min=0.0)
    exps = torch.exp(logits - shift)
    return exps / (torch.exp(-shift) + exps.sum(dim=dim, keepdim=True))


class _StraightThrough(torch.autograd.Function):
    """Forward the hard one-hot, backpropagate into the soft sample"""

    @staticmethod
    def forward(ctx, soft, hard):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def sample_gumbel_noise(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    uniform = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(uniform.clamp(min=tiny, max=1.0 - 1e-7)))


def gumbel_softmax(logits: torch.Tensor, cfg: GumbelConfig,
                   generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw one Gumbel-Softmax sample per row of a T x N logits matrix.

    Returns (sample, indices). With cfg.hard the sample is an exact one-hot in
    the forward pass and its gradient is that of the soft distribution.
    Without an explicit generator the noise is seeded from cfg.rng_seed, so
    repeated calls see identical noise (used to freeze noise in grad checks).
    """
    if logits.size(-1) < 2:
        raise ShapeError("gumbel_softmax needs at least two classes")
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.rng_seed)

    noise = sample_gumbel_noise(logits.shape, generator, dtype=logits.dtype)
    soft = F.softmax((logits + noise) / cfg.temperature, dim=-1)
    indices = soft.detach().argmax(dim=-1)
    if not cfg.hard:
        return soft, indices

    one_hot = F.one_hot(indices, logits.size(-1)).to(soft.dtype)
    return _StraightThrough.apply(soft, one_hot), indices


def cross_entropy(projected: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of 1-based targets under softmax(projected)"""
    if projected.dim() != 2 or targets.dim() != 1 or projected.size(0) != targets.size(0):
        raise ShapeError(f"cross_entropy got logits {tuple(projected.shape)} and targets {tuple(targets.shape)}")
    num_classes = projected.size(1)
    if bool(((targets < 1) | (targets > num_classes)).any()):
        raise VocabularyError(f"targets must lie in 1..{num_classes}")
    return F.cross_entropy(projected, targets.long() - 1)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b)

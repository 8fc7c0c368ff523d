"""
Optimizer plumbing: Adam with bias correction plus the Gumbel temperature schedule
"""

from typing import Iterable, Tuple

import torch

from core.errors import NonFiniteError


def build_optimizer(params: Iterable[torch.nn.Parameter], lr: float = 1e-3,
                    betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    """Adam over the given parameters; moment accumulators start at zero"""
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Adam) -> None:
    """Apply one bias-corrected Adam update in place, then zero the gradients.

    Refuses to step if any populated gradient is non-finite, leaving the
    parameters untouched.
    """
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise NonFiniteError("non-finite gradient before Adam step")
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


def gumbel_temperature(step: int, total_steps: int, start: float = 2.0, end: float = 0.5) -> float:
    """Linear anneal from start to end over total_steps, then held at end"""
    if total_steps <= 1:
        return end
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return start + (end - start) * progress

"""
Central finite-difference gradient checking
Compares autograd gradients of a scalar closure against (f(x+h) - f(x-h)) / 2h
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np
import torch


@dataclass
class GradCheckReport:
    """Worst relative error per parameter group"""
    max_rel_error: Dict[str, float]
    checked_entries: Dict[str, int]
    tolerance: float
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"grad_check tolerance={self.tolerance:g} worst={self.worst:.3e}"]
        for name, err in sorted(self.max_rel_error.items(), key=lambda kv: -kv[1]):
            flag = "❌" if name in self.failures else "✅"
            lines.append(f"   {flag} {name}: {err:.3e} over {self.checked_entries[name]} entries")
        return "\n".join(lines)


def _group_name(name: str) -> str:
    # "encoder.blocks.0.ffn1.1.weight" -> "encoder.blocks.0.ffn1"
    parts = name.split(".")
    return ".".join(parts[:-2]) if len(parts) > 2 else parts[0]


def grad_check(forward: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               tolerance: float = 1e-3, h: float = 1e-5, floor: float = 1e-4,
               max_entries: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Check the gradient of forward() with respect to every tensor in params.

    forward must be deterministic (freeze any sampling noise) and params should
    be 64-bit leaves with requires_grad. max_entries caps the number of
    perturbed entries per tensor; the subset is drawn with a fixed seed.
    """
    names = list(params.keys())
    tensors = [params[n] for n in names]
    loss = forward()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    counts: Dict[str, int] = {}

    for name, tensor, grad in zip(names, tensors, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.data.view(-1)
        flat_grad = grad.reshape(-1)
        indices = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            indices = rng.choice(flat.numel(), size=max_entries, replace=False)

        group = _group_name(name)
        for idx in indices:
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
                plus = forward().item()
                flat[idx] = original - h
                minus = forward().item()
                flat[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = flat_grad[idx].item()
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            errors[group] = max(errors.get(group, 0.0), rel)
        counts[group] = counts.get(group, 0) + len(indices)

    failures = [g for g, err in errors.items() if err >= tolerance]
    return GradCheckReport(max_rel_error=errors, checked_entries=counts,
                           tolerance=tolerance, failures=failures)

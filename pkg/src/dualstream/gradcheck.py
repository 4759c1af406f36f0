"""Central finite-difference gradient checks for torch modules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradCheckResult:
    n_params: int
    n_pass: int
    max_rel_err: float
    worst: str

    @property
    def pass_fraction(self) -> float:
        return self.n_pass / max(self.n_params, 1)


def numeric_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                     step: float = 1e-3) -> list[np.ndarray]:
    """Perturb each scalar of each parameter in place by +-step."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = np.zeros(p.shape, dtype=np.float64)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                g.reshape(-1)[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[np.ndarray]:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [np.zeros(p.shape) if g is None else g.detach().double().numpy() for p, g in zip(params, grads)]


def check_gradients(loss_fn: Callable[[], torch.Tensor], named_params: Sequence[tuple[str, torch.Tensor]],
                    step: float = 1e-3, rtol: float = 1e-3, floor: float = 1e-10) -> GradCheckResult:
    """Compare autograd against central differences, scalar by scalar.

    A scalar passes when ``|a - n| <= rtol * max(|a|, |n|)``, or when both
    are below ``floor`` (a parameter the loss does not depend on).
    """
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    ana = analytic_gradient(loss_fn, params)
    num = numeric_gradient(loss_fn, params, step)
    total = passed = 0
    worst, worst_err = "", 0.0
    for name, a, n in zip(names, ana, num):
        a, n = a.ravel(), n.ravel()
        scale = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        ok = (err <= rtol * scale) | (scale < floor)
        rel = np.where(scale < floor, 0.0, err / np.maximum(scale, 1e-300))
        total += a.size
        passed += int(ok.sum())
        if rel.size and rel.max() > worst_err:
            worst_err = float(rel.max())
            worst = f"{name}[{int(rel.argmax())}]"
    return GradCheckResult(total, passed, worst_err, worst)

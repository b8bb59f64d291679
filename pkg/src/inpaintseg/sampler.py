"""Expectations over the categorical proposal distribution.

All functions operate on the last axis of ``p`` (the ``C`` candidates) and
broadcast over leading batch axes.  ``loss_fn`` arguments take a ``LongTensor``
of cell indices and return the matching losses, e.g. ``lambda c: table[c]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch


@dataclass
class SmoothedDistribution:
    p: torch.Tensor          # carries gradient
    q: torch.Tensor          # sampling distribution, detached
    epsilon: float

    @property
    def num_cells(self) -> int:
        return self.p.shape[-1]

    def weights(self, cells: torch.Tensor) -> torch.Tensor:
        """Importance weights ``p(c) / q(c)``; only the numerator is differentiable."""
        pc = torch.gather(self.p, -1, cells)
        qc = torch.gather(self.q, -1, cells)
        return pc / qc


def smooth(p: torch.Tensor, epsilon: float) -> SmoothedDistribution:
    """Blend ``p`` with the uniform distribution so every cell has mass >= epsilon."""
    c = p.shape[-1]
    if not 0.0 <= epsilon < 1.0 / c:
        raise ValueError(f"epsilon must lie in [0, 1/C) = [0, {1.0 / c}), got {epsilon}")
    q = p.detach() * (1.0 - c * epsilon) + epsilon
    return SmoothedDistribution(p=p, q=q, epsilon=float(epsilon))


def uniform(p: torch.Tensor) -> SmoothedDistribution:
    """Uniform sampling distribution over the cells of ``p`` (ablation baseline)."""
    c = p.shape[-1]
    q = torch.full_like(p.detach(), 1.0 / c)
    return SmoothedDistribution(p=p, q=q, epsilon=1.0 / c)


def draw(dist: SmoothedDistribution, generator: Optional[torch.Generator] = None,
         num_samples: int = 1) -> torch.Tensor:
    """Sample cell indices from ``q``; returns shape ``(..., num_samples)``."""
    q = dist.q
    flat = q.reshape(-1, q.shape[-1]).to(torch.float64)
    cells = torch.multinomial(flat, num_samples, replacement=True, generator=generator)
    return cells.reshape(*q.shape[:-1], num_samples)


def exhaustive_expectation(p: torch.Tensor, loss_fn: Callable) -> torch.Tensor:
    """``sum_c p(c) * loss_fn(c)`` over all candidates."""
    c = p.shape[-1]
    cells = torch.arange(c).expand_as(p) if p.dim() > 1 else torch.arange(c)
    return (p * loss_fn(cells)).sum(-1)


def importance_estimate(p: torch.Tensor, epsilon: float, loss_fn: Callable,
                        generator: Optional[torch.Generator] = None,
                        num_samples: int = 1, dist: Optional[SmoothedDistribution] = None
                        ) -> torch.Tensor:
    """Monte Carlo estimate of ``E_p[loss]`` using samples from the smoothed ``q``.

    The estimate is ``mean_j p(c_j) / q(c_j) * loss_fn(c_j)`` with ``q`` held
    constant, so its gradient w.r.t. ``p`` is the likelihood-ratio gradient.
    Pass ``dist`` to sample from a different ``q`` (e.g. :func:`uniform`).
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if dist is None:
        dist = smooth(p, epsilon)
    cells = draw(dist, generator, num_samples)
    w = dist.weights(cells)
    return (w * loss_fn(cells)).mean(-1)


def sample_gumbel(shape, generator: Optional[torch.Generator] = None,
                  dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    e = -torch.log(u.clamp_min(tiny))
    return -torch.log(e.clamp_min(tiny))


def gumbel_softmax_sample(logits: torch.Tensor, temperature: float,
                          generator: Optional[torch.Generator] = None,
                          noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Relaxed one-hot sample ``softmax((logits + g) / temperature)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if noise is None:
        noise = sample_gumbel(logits.shape, generator, logits.dtype)
    return torch.softmax((logits + noise) / temperature, dim=-1)

"""Compare the ways of choosing a proposal during training.

A toy detector with 64 cells puts most of its mass on a few cells, and each
cell has a fixed loss.  We estimate ``E_p[loss]`` and its gradient w.r.t. the
logits with

* importance sampling from the smoothed distribution q (one sample per image),
* uniform sampling with the same p/q correction, and
* a Gumbel-softmax relaxation that weights the sampled loss by y_c.

The first two are unbiased; uniform sampling has much larger variance when p
is peaked because it rarely visits the cells that matter.  The relaxation is
biased at any temperature.

    python demos/02_sampling_estimators.py
"""

import argparse

import torch

from inpaintseg.sampler import exhaustive_expectation, gumbel_softmax_sample, importance_estimate, uniform

F64 = torch.float64


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--samples", type=int, default=20_000)
    parser.add_argument("--epsilon", type=float, default=0.005)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    gen = torch.Generator().manual_seed(args.seed)
    logits = (3.0 * torch.randn(64, generator=gen, dtype=F64)).requires_grad_()
    table = torch.rand(64, generator=gen, dtype=F64)
    p = torch.softmax(logits, 0)
    ranked = p.detach().sort(descending=True).values
    print(f"largest cell probability {float(ranked[0]):.3f}, "
          f"cells holding 90% of the mass: {int((ranked.cumsum(0) < 0.9).sum()) + 1}")

    exact = exhaustive_expectation(p, lambda c: table[c])
    exact_grad = torch.autograd.grad(exact, logits, retain_graph=True)[0]
    print(f"\nexhaustive value {exact.item():.5f}")

    rows = p.expand(args.samples, 64)
    for name, dist in (("importance", None), ("uniform", uniform(rows))):
        est = importance_estimate(rows, args.epsilon, lambda c: table[c], gen, dist=dist)
        grad = torch.autograd.grad(est.mean(), logits, retain_graph=True)[0]
        err = float((grad - exact_grad).norm() / exact_grad.norm())
        print(f"{name:>10}: mean {est.mean().item():.5f}  per-sample std {est.std().item():.4f}  "
              f"gradient rel. error {err:.3f}")

    for tau in (1.0, 0.1):
        y = gumbel_softmax_sample(logits.expand(args.samples, 64), tau, gen)
        cells = y.argmax(-1, keepdim=True)
        est = (y.gather(-1, cells) * table[cells]).squeeze(-1)
        print(f"gumbel t={tau}: mean {est.mean().item():.5f} (bias {(est.mean() - exact).item():+.5f})")


if __name__ == "__main__":
    main()

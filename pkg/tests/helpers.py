"""Finite-difference oracle shared by the gradient tests."""

import torch

FD_STEPS = (1e-3, 1e-6)
FD_RTOL = 1e-2


def fd_check(case, generator: torch.Generator, n_entries: int = 3) -> float:
    """Compare float32 autograd against central differences on a few entries.

    ``case(dtype)`` must return ``(loss_fn, tensor)`` built identically for
    float32 and float64. The gradient under test comes from the float32 build;
    the difference quotients are taken on the float64 twin, where rounding noise
    is negligible and a small step rarely straddles a ReLU or L1 kink. Entries
    are the largest-|grad| ones among a random subset. Returns the worst relative
    error over entries, each entry keeping its best step.
    """
    fn32, t32 = case(torch.float32)
    fn64, t64 = case(torch.float64)
    (grad,) = torch.autograd.grad(fn32(), t32)
    flat = grad.flatten()
    subset = torch.randperm(flat.numel(), generator=generator)[: max(64, n_entries)]
    order = subset[flat[subset].abs().argsort(descending=True)][:n_entries]
    worst = 0.0
    with torch.no_grad():
        view = t64.view(-1)
        for idx in order.tolist():
            orig = view[idx].item()
            an = float(flat[idx])
            best = float("inf")
            for step in FD_STEPS:
                view[idx] = orig + step
                up = float(fn64())
                view[idx] = orig - step
                down = float(fn64())
                view[idx] = orig
                fd = (up - down) / (2 * step)
                best = min(best, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
            worst = max(worst, best)
    return worst

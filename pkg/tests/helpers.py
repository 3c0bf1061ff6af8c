"""Finite-difference gradient oracle and other test utilities."""
import numpy as np
import torch

from fimpute.recnet import grad


def fd_check(loss_fn, module, n_coords=60, h=1e-4, floor=1e-6, seed=0):
    """Max relative error between autograd and central differences on random coordinates.

    Relative error is ``|a - b| / max(|a|, |b|, floor)``; everything runs in float64.
    The step balances O(h^2) truncation against round-off on losses of size ~100.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    g = grad(loss_fn, dict(params))
    worst = 0.0
    flat_choice = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    with torch.no_grad():
        for c in flat_choice:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            name, p = params[k]
            i = int(c - offsets[k])
            flat = p.view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
            fd = (up - down) / (2 * h)
            ad = float(g[name].reshape(-1)[i])
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), floor))
    return worst, len(flat_choice)

"""Central finite-difference verification of analytic gradients.

Runs in the package's native 64-bit mode. Stochastic layers (dropout) are
replayed with identical masks for every probe by snapshotting their rng
state before each forward pass.
"""

from __future__ import annotations

import numpy as np

from ..core import Rng
from .layers import Module

# keeps fd noise on near-zero gradients from registering as huge rel. error
_REL_GUARD = 1e-6


def grad_check(
    module: Module,
    inputs,
    loss_fn,
    n_params: int = 100,
    eps: float = 1e-4,
    rng: Rng | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn(module, inputs)` must return a scalar Tensor. Probes `n_params`
    randomly sampled trainable parameter entries; frozen parameters are
    never sampled (their analytic gradients are absent by contract).
    """
    rng = rng or Rng(0)
    params = [(n, t) for n, t in module.named_parameters() if t.requires_grad]
    if not params:
        return 0.0

    states = module.rng_states()

    def evaluate():
        module.set_rng_states(states)
        return loss_fn(module, inputs)

    module.zero_grad()
    loss = evaluate()
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params}

    sizes = np.array([t.size for _, t in params])
    total = int(sizes.sum())
    k = min(n_params, total)
    flat_choice = np.sort(rng.choice(total, size=k, replace=False))
    bounds = np.cumsum(sizes)

    max_rel = 0.0
    for flat in flat_choice:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        name, t = params[pi]
        idx = np.unravel_index(int(flat - (bounds[pi] - sizes[pi])), t.data.shape)
        original = t.data[idx]
        t.data[idx] = original + eps
        loss_plus = evaluate().item()
        t.data[idx] = original - eps
        loss_minus = evaluate().item()
        t.data[idx] = original
        fd = (loss_plus - loss_minus) / (2.0 * eps)
        an = float(analytic[name][idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), _REL_GUARD)
        max_rel = max(max_rel, rel)
    return max_rel

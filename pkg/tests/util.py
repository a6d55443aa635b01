"""Shared test helpers."""

import numpy as np


def central_difference_check(loss_fn, params, n_entries=3, eps=1e-6, seed=0):
    """Compare backprop gradients of ``loss_fn()`` with central differences on sampled entries.

    ``params`` maps names to leaf Values.  Finite differences run with
    gradient recording enabled so that the forward function is identical to
    the one that was differentiated.  Returns the worst
    ``|analytic - numeric| / max(1, |analytic|)`` and the analytic gradients.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_entries, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = grads[name].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst, grads


def randomize(model, scale=0.05, seed=0):
    """Add small Gaussian noise to every parameter (breaks zero initialisation)."""
    rng = np.random.default_rng(seed)
    for _, p in sorted(model.parameters().items()):
        p.data = p.data + scale * rng.normal(size=p.shape)

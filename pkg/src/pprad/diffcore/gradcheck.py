"""Central finite-difference check of analytic parameter gradients."""

import numpy as np

from .layers import Conv3d


def linear_probe_loss(rng, shape, dtype=np.float64):
    """Random linear functional of the output: ``L = sum(r * y)``; dL/dy = r."""
    r = rng.standard_normal(shape).astype(dtype)
    return lambda y: (float(np.sum(r * y)), r)


def quadratic_loss(y):
    return 0.5 * float(np.sum(y * y)), y


def _freeze_spectral_norm(net):
    convs = [m for m in net.module.modules() if isinstance(m, Conv3d) and m.spectral_norm]
    for c in convs:
        c.frozen_sigma = None
        c.frozen_sigma = c.effective_weight()[1]
    return convs


def grad_check(net, x, loss_fn, eps=1e-5, max_entries=None, rng=None, floor=1e-8):
    """Worst relative error between analytic and central-difference gradients.

    Every parameter tensor is checked; with ``max_entries`` only that many
    randomly chosen entries per tensor are perturbed.  Spectral-norm sigmas
    are frozen for the duration, matching the constant-sigma backward rule.
    The network is switched to float64 and left in eval mode.
    """
    rng = rng or np.random.default_rng(0)
    net.store.astype(np.float64)
    net.eval()
    x = x.astype(np.float64)
    convs = _freeze_spectral_norm(net)
    try:
        net.store.zero_grad()
        y = net.forward(x, record=True)
        _, gy = loss_fn(y)
        net.backward(gy, need_input=False)
        worst = 0.0
        for name, p in net.store:
            flat = p.value.reshape(-1)
            analytic = p.grad.reshape(-1).copy()
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                lp, _ = loss_fn(net.forward(x))
                flat[i] = orig - eps
                lm, _ = loss_fn(net.forward(x))
                flat[i] = orig
                numeric = (lp - lm) / (2 * eps)
                a = analytic[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
        return worst
    finally:
        for c in convs:
            c.frozen_sigma = None

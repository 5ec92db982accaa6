import numpy as np
import torch


def lin_params(layer):
    return layer.weight.detach().tolist(), layer.bias.detach().tolist()


def se_params(block):
    return (*lin_params(block.fc1), *lin_params(block.fc2))


def to_chw(t):
    """(1, C, H, W) tensor -> nested lists [c][y][x]."""
    return t[0].detach().tolist()


def finite_difference_check(loss_fn, tensors, n_samples=None, h=1e-4, rtol=1e-3, seed=0, atol=1e-9):
    """Compare autograd and central differences on (optionally sampled) entries of ``tensors``.

    Returns the worst relative error observed.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    entries = [(ti, idx) for ti, t in enumerate(tensors) for idx in np.ndindex(*t.shape)]
    rng = np.random.default_rng(seed)
    if n_samples is not None and n_samples < len(entries):
        entries = [entries[k] for k in rng.choice(len(entries), n_samples, replace=False)]
    worst = 0.0
    for ti, idx in entries:
        t = tensors[ti]
        analytic = float(t.grad[idx]) if t.grad is not None else 0.0
        with torch.no_grad():
            orig = float(t[idx])
            t[idx] = orig + h
            plus = float(loss_fn())
            t[idx] = orig - h
            minus = float(loss_fn())
            t[idx] = orig
        numeric = (plus - minus) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        err = 0.0 if scale < atol else abs(analytic - numeric) / scale
        worst = max(worst, err)
        assert err <= rtol, f"tensor {ti} entry {idx}: analytic {analytic} vs numeric {numeric}"
    return worst

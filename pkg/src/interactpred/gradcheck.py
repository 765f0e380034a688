"""Central finite differences for checking autograd gradients."""
from __future__ import annotations

import torch


def finite_difference(fn, tensors, eps: float = 1e-6, indices=None):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor in ``tensors``.

    Tensors are perturbed in place and restored. ``indices`` optionally maps a
    tensor position to a list of flat indices to probe; other entries stay zero.
    """
    grads = []
    with torch.no_grad():
        for pos, t in enumerate(tensors):
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            probe = indices.get(pos) if indices else None
            for i in (range(flat.numel()) if probe is None else probe):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = float(fn())
                flat[i] = orig - eps
                minus = float(fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradient(fn, tensors):
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||) over concatenated tensors; 0 when both vanish."""
    a = torch.cat([x.reshape(-1) for x in a]) if isinstance(a, (list, tuple)) else a.reshape(-1)
    b = torch.cat([x.reshape(-1) for x in b]) if isinstance(b, (list, tuple)) else b.reshape(-1)
    scale = max(a.norm().item(), b.norm().item())
    return 0.0 if scale == 0 else (a - b).norm().item() / scale

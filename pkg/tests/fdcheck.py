"""Central finite-difference gradient checking for loss functions."""

import torch


def finite_difference_grads(loss_fn, params, h_base: float = 1e-7):
    """Central-difference gradient of loss_fn() w.r.t. each parameter tensor.

    loss_fn must be a pure function of the current parameter values (call it
    with models in eval mode). Parameters are perturbed in place and restored.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = h_base * max(1.0, abs(orig))
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(grad)
    return grads


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in params]


def compare_grads(loss_fn, params, rtol: float = 1e-4, atol: float = 1e-6):
    """Max mismatch between analytic and finite-difference gradients.

    Pass criterion per coordinate: |a - f| <= atol + rtol * max(|a|, |f|),
    i.e. 1e-4 relative error with a small absolute floor for near-zero
    gradients (double-precision central differences resolve ~1e-9).
    Returns (ok, worst_abs_diff, worst_rel_diff).
    """
    ga = analytic_grads(loss_fn, params)
    with torch.no_grad():
        gf = finite_difference_grads(loss_fn, params)
    worst_abs = 0.0
    worst_rel = 0.0
    ok = True
    for a, f in zip(ga, gf):
        diff = (a - f).abs()
        worst_abs = max(worst_abs, float(diff.max()) if diff.numel() else 0.0)
        denom = torch.maximum(a.abs(), f.abs())
        rel = (diff / denom.clamp(min=1e-8))[denom > atol]
        if rel.numel():
            worst_rel = max(worst_rel, float(rel.max()))
        if not bool((diff <= atol + rtol * denom).all()):
            ok = False
    return ok, worst_abs, worst_rel

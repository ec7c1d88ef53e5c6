"""Finite-difference verification of the PLNet backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plnet import MAE, MSE, ArchSpec, ModelWeights, init_weights, masked_loss, plnet_backward, plnet_forward


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped_kinks: int
    mode: str


def _kink_signature(w: ModelWeights, x, truth, mask, mode):
    pred, acts = plnet_forward(w, x, cache=True)
    sig = [acts[k] > 0 for k in acts if k.endswith(".z")]
    if mode == MAE:
        sig.append(np.where(mask, pred > truth, False))
    return pred, sig


def grad_check(
    spec: ArchSpec = ArchSpec(8, 4, 2),
    seed: int = 0,
    eps: float = 1e-5,
    mode: str = MSE,
    size: int = 16,
    batch: int = 2,
    n_params: int = 200,
    valid_fraction: float = 0.5,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients on a random problem, in float64.

    Parameters whose ±eps perturbation flips any ReLU gate (or, for MAE, the
    sign of any valid residual) are skipped: the loss is not differentiable
    there and the finite difference is meaningless.
    """
    rng = np.random.default_rng(seed)
    w = init_weights(spec, seed).astype(np.float64)
    for name in w.params:
        if name.endswith(".b"):
            w.params[name] = rng.normal(0.0, 0.1, w.params[name].shape)
    x = rng.normal(size=(batch, spec.in_channels, size, size))
    truth = rng.normal(120.0, 20.0, size=(batch, size, size))
    mask = rng.random((batch, size, size)) < valid_fraction

    pred, acts = plnet_forward(w, x, cache=True)
    report = masked_loss(pred, truth, mask, mode)
    grads = plnet_backward(w, acts, report.gradient)
    _, base_sig = _kink_signature(w, x, truth, mask, mode)

    def loss_at(wp):
        p, sig = _kink_signature(wp, x, truth, mask, mode)
        same = all(np.array_equal(a, b) for a, b in zip(sig, base_sig))
        return masked_loss(p, truth, mask, mode).value, same

    names = list(w.params)
    sizes = np.array([w.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(offsets[-1])

    worst = 0.0
    checked = skipped = 0
    for flat in order:
        if checked >= n_params:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        param = w.params[name].reshape(-1)
        orig = param[idx]
        param[idx] = orig + eps
        lp, same_p = loss_at(w)
        param[idx] = orig - eps
        lm, same_m = loss_at(w)
        param[idx] = orig
        if not (same_p and same_m):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * eps)
        analytic = grads[name].reshape(-1)[idx]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
        checked += 1
    return GradCheckResult(float(worst), checked, skipped, mode)

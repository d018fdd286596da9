"""Central finite-difference gradient verification.

The numeric side only ever calls an operation's *forward* pass, so it
stays independent of the reverse-mode rules it is used to check. Run it
on float64 tensors for a trustworthy reference.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(
    fn: Callable[[], Tensor],
    wrt: Tensor,
    seed: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of sum(fn() * seed) with respect to wrt.

    ``fn`` re-evaluates the forward pass from current tensor contents;
    ``wrt.data`` is perturbed in place one element at a time and restored.
    """
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float((fn().data * seed).sum())
        flat[i] = orig - eps
        lo = float((fn().data * seed).sum())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(
    fn: Callable[[Tape], Tensor],
    inputs: Sequence[Tensor],
    rtol: float = 1e-4,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of fn against central differences.

    ``fn`` takes a tape (or None) and returns the output tensor. Every
    input with requires_grad set is checked. Returns the worst relative
    error seen; raises AssertionError beyond rtol.
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    out = fn(tape)
    seed = rng.standard_normal(out.shape if out.shape else ()).astype(np.float64)
    tape.backward(out, seed.astype(out.dtype))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "input with requires_grad received no gradient"
        num = numeric_gradient(lambda: fn(None), t, seed, eps=eps)
        denom = np.maximum(np.abs(num), np.abs(t.grad)).max()
        err = np.abs(t.grad - num).max() / max(denom, 1e-12)
        worst = max(worst, float(err))
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol:g}"
    return worst

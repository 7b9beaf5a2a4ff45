"""Independent numerical oracles shared by the tests."""

import numpy as np
import torch


def central_difference_check(loss_fn, tensors, rtol=1e-4, atol=1e-8, eps=1e-6, max_entries=None, rng=None):
    """Compare autograd gradients of ``loss_fn()`` w.r.t. ``tensors`` with
    central finite differences. Everything must be float64.

    ``max_entries`` samples that many coordinates per tensor instead of all.
    Returns the worst relative discrepancy seen.
    """
    for t in tensors:
        assert t.dtype == torch.float64
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        n = flat.numel()
        picks = range(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in picks:
            i = int(i)
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
            fd = (up - down) / (2 * eps)
            an = g.view(-1)[i].item()
            np.testing.assert_allclose(an, fd, rtol=rtol, atol=atol, err_msg=f"entry {i} of tensor {tuple(t.shape)}")
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-12))
    return worst


def naive_conv1d_same(x, w, b):
    """O(N*K*S) loop reference: y[k, n] = b[k] + sum_s w[k, s] * x[n + s - S//2]."""
    N = len(x)
    K, S = w.shape
    y = np.zeros((K, N))
    for k in range(K):
        for n in range(N):
            acc = b[k]
            for s in range(S):
                j = n + s - S // 2
                if 0 <= j < N:
                    acc += w[k, s] * x[j]
            y[k, n] = acc
    return y


def random_pose7(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.sign(q[:, :1])
    return np.concatenate([q, rng.uniform(0, 1, (n, 3))], axis=1)


ACCEPTANCE_RESULTS = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance verdict for the end-of-session summary."""
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)

"""Shared test utilities: gradient checking against central finite differences."""

import numpy as np

from adapterlab import tensor as T


def gradcheck(make_loss, params, rng, n_coords=20, step=1e-5, rtol=1e-6, atol=1e-8):
    """Compare analytic gradients of make_loss() against central differences.

    make_loss rebuilds the scalar loss from scratch each call so the finite
    difference probe sees the perturbed parameters.
    """
    T.reset_tape()
    for p in params:
        p.zero_grad()
    loss = make_loss()
    T.backward(loss)
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        n = p.data.size
        coords = rng.choice(n, size=min(n_coords, n), replace=False)
        analytic = p.grad.reshape(-1)[coords]
        numeric = T.finite_diff(make_loss, p, coords, step=step)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
    T.reset_tape()


def random_loss_of(out, rng):
    """Reduce a tensor to a scalar with fixed random weights (keeps FD informative)."""
    w = T.Tensor(rng.normal(size=out.shape))
    return T.tsum(T.mul(out, w))

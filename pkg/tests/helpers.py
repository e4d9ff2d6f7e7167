"""Shared oracles for the test suite."""
import numpy as np

from ssfl_sim import nn_core as nn

FD_STEP = 1e-4
FD_RTOL = 1e-4
FD_ATOL = 1e-7
KINK_MARGIN = 1e-3


def random_params(rng, normalize=False):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 9))] + [int(rng.integers(2, 33)) for _ in range(depth - 1)] + [int(rng.integers(2, 7))]
    p = nn.init_mlp(sizes, rng, normalize=normalize)
    for b in p.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    for n in p.norms:
        if n is not None:
            n.mean[:] = rng.normal(scale=0.3, size=n.mean.shape)
            n.var[:] = rng.uniform(0.3, 2.0, size=n.var.shape)
            n.scale[:] = rng.uniform(0.5, 1.5, size=n.scale.shape)
            n.shift[:] = rng.normal(scale=0.3, size=n.shift.shape)
    return p


def random_terms(rng, params):
    k, d = params.num_classes, params.in_dim
    terms = []
    for kind in rng.permutation(["ce", "kl", "ce"])[: int(rng.integers(1, 4))]:
        n = int(rng.integers(1, 17))
        x = rng.normal(size=(n, d))
        if kind == "ce" and rng.random() < 0.5:
            target = nn.one_hot(rng.integers(0, k, n), k)
        else:
            target = rng.dirichlet(np.ones(k), size=n)
        terms.append(nn.LossTerm(x, target, str(kind), float(rng.uniform(0.1, 2.0))))
    return terms


def near_kink(params, terms):
    """True if any ReLU input lies within the finite-difference reach of zero."""
    for t in terms:
        h = t.x
        for w, b, n in zip(params.weights[:-1], params.biases[:-1], params.norms[:-1]):
            u = h @ w.T + b
            if n is not None:
                u = (u - n.mean) / np.sqrt(n.var + nn.NORM_EPS) * n.scale + n.shift
            if (np.abs(u) < KINK_MARGIN).any():
                return True
            h = np.maximum(u, 0)
    return False


def random_case(rng, normalize=False):
    """Random network and loss mix, redrawn while any ReLU input sits at a kink."""
    while True:
        params = random_params(rng, normalize)
        terms = random_terms(rng, params)
        if not near_kink(params, terms):
            return params, terms


def fd_gradient_check(params, terms):
    """Assert every analytic gradient entry against central differences.

    Returns the largest absolute gap seen; entries under ``FD_ATOL`` pass outright.
    """
    _, grads, _ = nn.value_and_grad(params, terms)
    worst = 0.0
    for arr, g in zip(params.trainable(), grads.trainable()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + FD_STEP
            fp = nn.loss_value(params, terms)
            arr[idx] = old - FD_STEP
            fm = nn.loss_value(params, terms)
            arr[idx] = old
            num = (fp - fm) / (2 * FD_STEP)
            diff = abs(num - g[idx])
            if diff > FD_ATOL:
                rel = diff / max(abs(num), abs(g[idx]))
                assert rel < FD_RTOL, f"entry {idx}: analytic {g[idx]!r} vs numeric {num!r}"
            worst = max(worst, diff)
    return worst

"""Reference numpy implementation of the dense-network kernels."""

import numpy as np

TANH = 0
SILU = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(weights, biases, inp, act):
    """Run the network on a ``(batch, in)`` block.

    Returns the output and a cache of ``(layer inputs, pre-activations)``
    consumed by :func:`mlp_backward`.
    """
    h = np.ascontiguousarray(inp, dtype=np.float64)
    hs = [h]
    zs = []
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W + b
        if i == last:
            h = z
        else:
            zs.append(z)
            h = np.tanh(z) if act == TANH else z * _sigmoid(z)
            hs.append(h)
    return h, (hs, zs)


def mlp_backward(weights, cache, grad_out, act, need_input_grad):
    hs, zs = cache
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    n = len(weights)
    gws = [None] * n
    gbs = [None] * n
    for i in range(n - 1, -1, -1):
        gws[i] = hs[i].T @ g
        gbs[i] = g.sum(axis=0)
        if i == 0 and not need_input_grad:
            return gws, gbs, None
        g = g @ weights[i].T
        if i > 0:
            if act == TANH:
                g = g * (1.0 - hs[i] * hs[i])
            else:
                z = zs[i - 1]
                s = _sigmoid(z)
                g = g * (s * (1.0 + z * (1.0 - s)))
    return gws, gbs, g

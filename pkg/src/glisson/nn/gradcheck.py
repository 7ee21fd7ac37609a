"""Finite-difference verification of every backward pass."""
from __future__ import annotations

import numpy as np

from .layers import MaxPool2, ReLU
from .model import ModelSpec, Network

KINK_MARGIN = 20.0  # in units of eps


def _random_inputs(spec, rng, batch):
    return [rng.standard_normal((batch, *inp["shape"])) for inp in spec.inputs]


def _layer_inputs(net: Network, inputs):
    """Yield ``(layer, input)`` for every layer before the softmax."""
    outs = []
    for x, layers in zip(inputs, net.branches):
        stop = len(layers) - (0 if net.head else 1)
        for layer in layers[:stop]:
            yield layer, x
            x = layer.forward(x)
        outs.append(x)
    if net.head:
        x = np.concatenate(outs, axis=1)
        for layer in net.head[:-1]:
            yield layer, x
            x = layer.forward(x)


def _near_kink(net: Network, inputs, margin: float) -> bool:
    """True when a relu input or a pooling maximum is too close to a switch point."""
    for layer, x in _layer_inputs(net, inputs):
        if isinstance(layer, ReLU) and np.min(np.abs(x)) < margin:
            return True
        if isinstance(layer, MaxPool2):
            n, c, h, w = x.shape
            blocks = (x[:, :, :h // 2 * 2, :w // 2 * 2]
                      .reshape(n, c, h // 2, 2, w // 2, 2)
                      .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
            top2 = np.sort(blocks, axis=-1)[..., 2:]
            # all-zero windows (post-relu) cannot switch winner
            close = (top2[..., 1] - top2[..., 0] < margin) & (top2[..., 1] > 0)
            if np.any(close):
                return True
    return False


def grad_check(spec: ModelSpec, eps: float = 1e-5, seed: int = 0, batch: int = 3,
               max_tries: int = 500) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Runs in float64 with dropout disabled.  Inputs are redrawn until no relu
    pre-activation or pooling maximum sits within ``KINK_MARGIN * eps`` of a
    switch.
    The relative error of a parameter is ``|a - n| / max(|a|, |n|, 1e-7)``.
    """
    rng = np.random.default_rng(seed)
    net = Network(spec, seed=int(rng.integers(2 ** 63)), dtype=np.float64)
    labels = rng.integers(0, spec.class_count, size=batch)
    for _ in range(max_tries):
        inputs = _random_inputs(spec, rng, batch)
        if not _near_kink(net, inputs, KINK_MARGIN * eps):
            break
    else:
        raise RuntimeError("could not draw inputs away from activation kinks")

    net.loss_and_grad(inputs, labels, training=False)
    analytic = [layer.grads[name].copy() for layer, name in net.parameters()]
    worst = 0.0
    for (layer, name), g in zip(net.parameters(), analytic):
        p = layer.params[name]
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            up = net.loss(inputs, labels)
            p[i] = old - eps
            down = net.loss(inputs, labels)
            p[i] = old
            num = (up - down) / (2 * eps)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-7)
            worst = max(worst, err)
    return worst

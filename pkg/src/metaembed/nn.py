"""Small dense-network core: layers, hand-written backprop, Adam, checkpoints.

Layers work on a single vector ``(in,)`` or a batch ``(n, in)``. Gradients
from :meth:`Dense.backward` are summed over the batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation

ACTIVATIONS = ("relu", "sigmoid", "identity")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
CHECKPOINT_MAGIC = b"DMEA"
CHECKPOINT_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name, z):
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


class Dense:
    """Fully connected layer ``activation(W x + b)`` with ``W`` of shape (out, in)."""

    def __init__(self, weight, bias, activation="identity"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ContractViolation(
                f"inconsistent shapes: weight {weight.shape}, bias {bias.shape}"
            )
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.grad_weight = np.zeros_like(weight)
        self.grad_bias = np.zeros_like(bias)
        self._cache = None

    @classmethod
    def glorot(cls, in_dim, out_dim, activation, rng):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(weight, np.zeros(out_dim), activation)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ContractViolation(
                f"input width {x.shape[-1]} != layer in-dim {self.in_dim}"
            )
        z = x @ self.weight.T + self.bias
        a = _activate(self.activation, z)
        self._cache = (x, z, a)
        return a

    def forward_blocks(self, x, n_blocks):
        """Forward pass summing equal-width input blocks in sorted order.

        The per-block partial products are added smallest first, so
        reordering the input blocks (together with the matching weight
        columns) leaves the output bitwise unchanged.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or self.in_dim % n_blocks:
            raise ContractViolation(
                f"input width {x.shape[-1]} does not split into {n_blocks} blocks"
            )
        w = self.in_dim // n_blocks
        parts = np.stack([
            x[..., j * w:(j + 1) * w] @ np.ascontiguousarray(self.weight[:, j * w:(j + 1) * w].T)
            for j in range(n_blocks)
        ])
        z = np.sort(parts, axis=0).sum(axis=0) + self.bias
        a = _activate(self.activation, z)
        self._cache = (x, z, a)
        return a

    def backward(self, grad_out):
        """Accumulate parameter gradients and return the input gradient."""
        if self._cache is None:
            raise ContractViolation("backward called without a cached forward pass")
        x, z, a = self._cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != a.shape:
            raise ContractViolation(
                f"gradient shape {grad_out.shape} != output shape {a.shape}"
            )
        dz = grad_out * _activation_grad(self.activation, z, a)
        if dz.ndim == 1:
            self.grad_weight = np.outer(dz, x)
            self.grad_bias = dz.copy()
        else:
            self.grad_weight = dz.T @ x
            self.grad_bias = dz.sum(axis=0)
        return dz @ self.weight

    def pre_activation(self):
        if self._cache is None:
            return None
        return self._cache[1]

    def clear(self):
        self._cache = None


class Sequential:
    """A fixed stack of :class:`Dense` layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def build(cls, dims, activations, rng):
        if len(activations) != len(dims) - 1:
            raise ContractViolation("need one activation per layer")
        return cls(
            Dense.glorot(i, o, act, rng)
            for i, o, act in zip(dims[:-1], dims[1:], activations)
        )

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]


def forward(layer, x):
    """Apply one layer to a vector (or batch)."""
    return layer.forward(x)


def backward(network, grad_out):
    """Backpropagate ``grad_out`` through ``network``.

    Returns
    -------
    param_grads : list of ndarray
        In the order of ``network.params()``.
    grad_in : ndarray
    """
    grad_in = network.backward(grad_out)
    return network.grads(), grad_in


def squared_loss(output, target):
    """Sum of squared errors and its gradient with respect to ``output``."""
    diff = np.asarray(output) - np.asarray(target)
    return float(np.sum(diff * diff)), 2.0 * diff


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Parameters are modified in place (so layers holding references see the
    update); the same list and the advanced state are returned.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def monotone_adam(loss_and_grads, params, state, epochs, slack=0.0,
                  min_lr=1e-12, on_epoch=None):
    """Adam with step rejection so the recorded loss never rises.

    ``loss_and_grads()`` evaluates the objective at the current ``params``.
    A step whose loss exceeds ``previous * (1 + slack)`` is undone and
    retried at half the learning rate; accepted steps let the rate recover
    by 5% up to its initial value.

    Returns
    -------
    curve : list of float
        Loss at the start of every epoch followed by the final loss.
    """
    base_lr = state.lr
    loss, grads = loss_and_grads()
    curve = [loss]
    for epoch in range(epochs):
        saved = ([p.copy() for p in params], [m.copy() for m in state.m],
                 [v.copy() for v in state.v], state.step)
        while True:
            adam_step(params, grads, state)
            new_loss, new_grads = loss_and_grads()
            if np.isfinite(new_loss) and new_loss <= loss + slack * abs(loss):
                break
            for p, old in zip(params, saved[0]):
                p[...] = old
            for m, old in zip(state.m, saved[1]):
                m[...] = old
            for v, old in zip(state.v, saved[2]):
                v[...] = old
            state.step = saved[3]
            state.lr *= 0.5
            if state.lr < min_lr:
                return curve
        loss, grads = new_loss, new_grads
        state.lr = min(base_lr, state.lr * 1.05)
        curve.append(loss)
        if on_epoch is not None and on_epoch(epoch, curve):
            break
    return curve


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps
        )

    def step(self, grads):
        adam_step(self.params, grads, self.state)


# -- finite differences ------------------------------------------------------

def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradients(f, params, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic_grads, numeric_grads):
    worst = 0.0
    for a, n in zip(analytic_grads, numeric_grads):
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst


def gradient_check(network, x, loss, h=1e-5):
    """Largest relative gap between backprop and central-difference gradients.

    ``loss(output)`` must return ``(value, d value / d output)``.
    """
    out = network.forward(x)
    _, grad_out = loss(out)
    analytic, _ = backward(network, grad_out)
    analytic = [g.copy() for g in analytic]

    def f():
        return loss(network.forward(x))[0]

    numeric = numeric_gradients(f, network.params(), h)
    return max_relative_error(analytic, numeric)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, layers):
    """Serialize dense layers to the ``DMEA`` binary format.

    Layout: magic, u32 version, u32 layer count, then per layer u32 in-dim,
    u32 out-dim, u8 activation code, weights (row-major) and bias as
    little-endian float64.
    """
    layers = list(layers)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layers)))
        for layer in layers:
            fh.write(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                                 _ACT_CODES[layer.activation]))
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DMEA checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    layers = []
    for _ in range(count):
        in_dim, out_dim, code = struct.unpack_from("<IIB", blob, offset)
        offset += 9
        n_w = in_dim * out_dim
        weight = np.frombuffer(blob, dtype="<f8", count=n_w, offset=offset)
        offset += 8 * n_w
        bias = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append(Dense(weight.reshape(out_dim, in_dim).astype(np.float64),
                            bias.astype(np.float64), ACTIVATIONS[code]))
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return layers

"""Small dense networks with hand-written backprop, Adam and replay memory.

Everything runs on float64 numpy arrays. Weight matrices are stored as
``(fan_in, fan_out)`` so a layer computes ``x @ W + b`` on row-major batches.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DenseNet",
    "ForwardCache",
    "AdamState",
    "ReplayBuffer",
    "adam_step",
    "clip_global_norm",
    "soft_update",
    "hard_update",
    "logistic",
    "save_net",
    "load_net",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "numerical_gradient",
    "relative_error",
]

OUTPUT_ACTIVATIONS = ("linear", "logistic")

# 12 magic bytes + uint32 format version = 16-byte header
CHECKPOINT_MAGIC = b"DEEPRAT-NET\x00"
CHECKPOINT_VERSION = 1


def logistic(z):
    """Overflow-free logistic function (tanh form)."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class ForwardCache:
    inputs: list  # activation entering each layer
    pre: list  # pre-activation of each layer
    output: np.ndarray


class DenseNet:
    """Multilayer perceptron: rectifier hidden layers, linear or logistic output.

    Parameters
    ----------
    widths : sequence of int
        Layer widths including input and output, e.g. ``(73, 256, 128, 7)``.
    output_activation : {"linear", "logistic"}
    rng : numpy Generator, optional
        Source for Xavier-uniform initialisation. Without one the
        parameters start at zero.
    """

    def __init__(self, widths, output_activation="linear", rng=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.widths = widths
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return copy.deepcopy(self)

    def same_architecture(self, other):
        return (
            isinstance(other, DenseNet)
            and self.widths == other.widths
            and self.output_activation == other.output_activation
        )

    def forward(self, x):
        """Evaluate the network on one vector or a batch of row vectors.

        Returns the output (same leading shape as ``x``) and the cache
        needed by :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {a.shape[-1]} != {self.widths[0]}")
        inputs, pre = [], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            pre.append(z)
            if i < last:
                a = np.maximum(z, 0.0)
            elif self.output_activation == "logistic":
                a = logistic(z)
            else:
                a = z
        out = a[0] if squeeze else a
        return out, ForwardCache(inputs, pre, a)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_output, grad_output_pre=None):
        """Reverse-mode pass.

        ``grad_output`` is dL/d(output) with the shape of the forward output.
        ``grad_output_pre``, if given, is an extra dL/d(pre-activation) of
        the output layer (for penalties on it). Returns
        ``(param_grads, grad_input)`` where ``param_grads`` follows the order
        of :meth:`params`.
        """
        g = np.asarray(grad_output, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        if g.shape != cache.output.shape:
            raise ValueError(f"gradient shape {g.shape} != output {cache.output.shape}")
        if self.output_activation == "logistic":
            y = cache.output
            g = g * y * (1.0 - y)
        if grad_output_pre is not None:
            extra = np.asarray(grad_output_pre, dtype=np.float64)
            g = g + (extra[None, :] if extra.ndim == 1 else extra)
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (cache.pre[i - 1] > 0.0)
        return grads, (g[0] if squeeze else g)

    def checksum(self):
        """Order-sensitive digest of all parameters (for no-mutation checks)."""
        import hashlib

        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def clip_global_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None or max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return grads


@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state):
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments must align")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def soft_update(target, main, tau):
    """``target <- tau * main + (1 - tau) * target`` for every parameter."""
    if not target.same_architecture(main):
        raise ValueError("soft_update needs identical architectures")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for pt, pm in zip(target.params(), main.params()):
        pt *= 1.0 - tau
        pt += tau * pm
    return target


def hard_update(target, main):
    if not target.same_architecture(main):
        raise ValueError("hard_update needs identical architectures")
    for pt, pm in zip(target.params(), main.params()):
        pt[...] = pm
    return target


class ReplayBuffer:
    """Fixed-capacity FIFO ring of ``(state, action, reward, next_state)``."""

    def __init__(self, capacity, state_dim, action_dim=1, action_dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim), dtype=action_dtype)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, state, action, reward, next_state):
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_indices(self):
        """Slot indices from oldest to newest."""
        start = self.cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size, rng):
        """Uniform mini-batch without replacement; ``None`` if too few stored."""
        if self.size < batch_size:
            return None
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
        )


def numerical_gradient(fn, params, h=1e-5):
    """Central finite differences of the scalar ``fn()`` w.r.t. each array.

    Every entry of every array in ``params`` is perturbed in place and
    restored, so ``fn`` must read the live arrays.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a), np.asarray(n)
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


# -- checkpoint format -------------------------------------------------------
#
# header   : 12-byte magic, uint32 version
# body     : uint32 n_widths, uint32 widths[n], uint32 output-activation code,
#            then per layer W (row-major, fan_in x fan_out) and b, float64.
# All integers and floats little-endian.


def save_net(net, path):
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<I", len(net.widths)))
    parts.append(struct.pack(f"<{len(net.widths)}I", *net.widths))
    parts.append(struct.pack("<I", OUTPUT_ACTIVATIONS.index(net.output_activation)))
    for p in net.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_net(path):
    data = Path(path).read_bytes()
    if data[:12] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (version,) = struct.unpack_from("<I", data, 12)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    widths = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    (act,) = struct.unpack_from("<I", data, off)
    off += 4
    net = DenseNet(widths, OUTPUT_ACTIVATIONS[act])
    for p in net.params():
        count = p.size
        p[...] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(p.shape)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return net

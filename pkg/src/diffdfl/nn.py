"""Small dense-network engine with exact reverse-mode products.

Every trainable array of a model lives in one flat float64 buffer
(:class:`ParamVector`).  Networks keep only offsets into that buffer, so a
gradient, an optimizer state and a checkpoint all share the same indexing.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("identity", "relu", "silu")


class ParamVector:
    """Flat parameter buffer plus a ``(name, offset, shape)`` layout table."""

    def __init__(self):
        self.values = np.zeros(0)
        self.layout: list[tuple[str, int, tuple[int, ...]]] = []
        self._index: dict[str, tuple[int, tuple[int, ...]]] = {}

    def __len__(self):
        return self.values.size

    def reserve(self, name: str, shape, init=None) -> int:
        """Append a block named ``name`` and return its offset."""
        if name in self._index:
            raise ValueError(f"duplicate parameter block {name!r}")
        shape = tuple(int(s) for s in shape)
        size = math.prod(shape)
        offset = self.values.size
        block = np.zeros(size) if init is None else np.asarray(init, dtype=float).reshape(size)
        self.values = np.concatenate([self.values, block])
        self.layout.append((name, offset, shape))
        self._index[name] = (offset, shape)
        return offset

    def view(self, name: str, values=None) -> np.ndarray:
        """Reshaped view of block ``name`` inside ``values`` (default: own buffer)."""
        offset, shape = self._index[name]
        buf = self.values if values is None else values
        return buf[..., offset:offset + math.prod(shape)].reshape(buf.shape[:-1] + shape)

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.values)

    def copy_values(self) -> np.ndarray:
        return self.values.copy()

    def set_values(self, values) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} parameters, got {values.shape}")
        self.values[:] = values


def _act(name, a):
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    return a * expit(a)


def _act_grad(name, a):
    if name == "identity":
        return np.ones_like(a)
    if name == "relu":
        # subgradient 0 at the kink
        return (a > 0.0).astype(float)
    sig = expit(a)
    return sig * (1.0 + a * (1.0 - sig))


class DenseNet:
    """Multilayer perceptron with a linear output layer.

    ``widths`` lists every layer width including input and output, so
    ``DenseNet([3, 4, 2], params)`` has one hidden layer of width 4.  The
    hidden activation is applied after every layer except the last.
    """

    def __init__(self, widths, params: ParamVector, activation="silu", name="net",
                 rng: np.random.Generator | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 0 for w in widths) or widths[-1] < 1:
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.params = params
        self.name = name
        self._blocks = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w_init = None
            if rng is not None:
                w_init = rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)), size=(fan_out, fan_in))
            w_off = params.reserve(f"{name}.W{i}", (fan_out, fan_in), w_init)
            b_off = params.reserve(f"{name}.b{i}", (fan_out,))
            self._blocks.append((w_off, b_off, fan_in, fan_out))

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def _weights(self, i):
        w_off, b_off, fan_in, fan_out = self._blocks[i]
        v = self.params.values
        return v[w_off:w_off + fan_in * fan_out].reshape(fan_out, fan_in), v[b_off:b_off + fan_out]

    def _run(self, inp):
        h = inp
        pre_acts, inputs = [], []
        last = len(self._blocks) - 1
        for i in range(len(self._blocks)):
            W, b = self._weights(i)
            inputs.append(h)
            a = h @ W.T + b
            if i == last:
                h = a
            else:
                pre_acts.append(a)
                h = _act(self.activation, a)
        return h, inputs, pre_acts

    def _check_input(self, inp):
        inp = np.asarray(inp, dtype=float)
        if inp.shape[-1] != self.in_dim or inp.ndim not in (1, 2):
            raise ValueError(f"{self.name}: expected input width {self.in_dim}, got shape {inp.shape}")
        return inp

    def forward(self, inp):
        inp = self._check_input(inp)
        single = inp.ndim == 1
        out, _, _ = self._run(np.atleast_2d(inp))
        return out[0] if single else out

    def vjp(self, inp, cotangent, per_example=False, row_scale=None, sq_norms=False):
        """Return ``(param_grad, input_grad)`` for cotangent ``cotangent``.

        ``param_grad`` is a full-length array aligned with ``params.values``
        (zero outside this net's blocks).  For batched input it is summed
        over the batch unless ``per_example`` is set, in which case it has
        shape ``(batch, len(params))``.

        ``row_scale`` multiplies each row's contribution to ``param_grad``
        only (``input_grad`` stays unscaled).  With ``sq_norms`` a third
        value is returned: the squared norm of every row's unscaled
        parameter gradient, computed without forming it.
        """
        inp = self._check_input(inp)
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape[-1] != self.out_dim or cot.shape[:-1] != inp.shape[:-1]:
            raise ValueError(f"{self.name}: cotangent shape {cot.shape} does not match output")
        single = inp.ndim == 1
        x2, c2 = np.atleast_2d(inp), np.atleast_2d(cot)
        _, inputs, pre_acts = self._run(x2)
        batch = x2.shape[0]
        if per_example:
            grad = np.zeros((batch, len(self.params)))
        else:
            grad = np.zeros(len(self.params))
        scale = None if row_scale is None else np.asarray(row_scale, dtype=float).reshape(batch, 1)
        norms = np.zeros(batch)
        delta = c2
        for i in reversed(range(len(self._blocks))):
            w_off, b_off, fan_in, fan_out = self._blocks[i]
            if i < len(self._blocks) - 1:
                delta = delta * _act_grad(self.activation, pre_acts[i])
            a_in = inputs[i]
            if sq_norms:
                # |delta a^T|_F^2 + |delta|^2 per row
                norms += np.einsum("ij,ij->i", delta, delta) * (1.0 + np.einsum("ij,ij->i", a_in, a_in))
            d_acc = delta if scale is None else delta * scale
            if per_example:
                grad[:, w_off:w_off + fan_in * fan_out] = (
                    d_acc[:, :, None] * a_in[:, None, :]).reshape(batch, -1)
                grad[:, b_off:b_off + fan_out] = d_acc
            else:
                grad[w_off:w_off + fan_in * fan_out] = (d_acc.T @ a_in).ravel()
                grad[b_off:b_off + fan_out] = d_acc.sum(axis=0)
            W, _ = self._weights(i)
            delta = delta @ W
        if single:
            out = (grad[0] if per_example else grad), delta[0]
            return out + (norms[0],) if sq_norms else out
        return (grad, delta, norms) if sq_norms else (grad, delta)


def net_forward(net: DenseNet, inp):
    return net.forward(inp)


def net_vjp(net: DenseNet, inp, cotangent, per_example=False):
    return net.vjp(inp, cotangent, per_example=per_example)


def sinusoidal_embed(t, dim: int = 16):
    """Interleaved ``sin/cos`` features of timestep(s) ``t``.

    Slot ``2k`` holds ``sin(t * f_k)`` and slot ``2k + 1`` holds
    ``cos(t * f_k)`` with ``f_k = 10000 ** (-2k / dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("timestep must be non-negative")
    freqs = 10000.0 ** (-np.arange(dim // 2) * 2.0 / dim)
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class TimeEmbedding:
    """Sinusoidal features followed by FC -> SiLU -> FC."""

    def __init__(self, params: ParamVector, embed_dim=16, proj_dim=32, name="temb", rng=None):
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim
        self.net = DenseNet([embed_dim, proj_dim, proj_dim], params, "silu", name, rng)

    @property
    def out_dim(self):
        return self.proj_dim

    def features(self, t):
        return sinusoidal_embed(t, self.embed_dim)

    def forward(self, t):
        return self.net.forward(self.features(t))

    def vjp(self, t, cotangent, per_example=False, row_scale=None, sq_norms=False):
        out = self.net.vjp(self.features(t), cotangent, per_example, row_scale, sq_norms)
        return (out[0], out[2]) if sq_norms else out[0]

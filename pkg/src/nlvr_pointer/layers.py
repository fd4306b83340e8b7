"""Differentiable layers shared by the comprehension model and the pointer network.

Sequence layers work on right-padded batches shaped ``(batch, time, features)``
together with per-row lengths.  Outputs at padded positions are finite but
meaningless; downstream code must mask them.
"""

from __future__ import annotations

from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import xavier_uniform

ACTIVATIONS = ("none", "relu", "tanh")


class Layer:
    """Minimal parameter container; subclasses list their tensors in ``_params``."""

    _params: Tuple[str, ...] = ()
    _children: Tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr in self._params:
            value = getattr(self, attr)
            if value is not None:
                yield prefix + attr, value
        for attr in self._children:
            yield from getattr(self, attr).named_parameters(f"{prefix}{attr}.")


class Embedding(Layer):
    _params = ("weight",)

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.weight = ad.parameter(xavier_uniform((vocab_size, dim), rng))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"word id out of range for vocabulary of size {self.vocab_size}")
        return ad.getitem(self.weight, ids)


def embedding_lookup(table: Embedding, ids: Sequence[int]) -> List[Tensor]:
    rows = table(ids)
    return [rows[i] for i in range(len(ids))]


class Linear(Layer):
    """``y = act(x W^T + b)`` with ``W`` shaped (out, in)."""

    _params = ("weight", "bias")

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        bias: bool = True,
        activation: str = "none",
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = ad.parameter(xavier_uniform((out_dim, in_dim), rng))
        self.bias = ad.parameter(np.zeros(out_dim)) if bias else None
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"linear layer expects input dim {self.in_dim}, got {x.shape}")
        squeeze = x.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, -1))
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        if self.activation == "relu":
            y = ad.relu(y)
        elif self.activation == "tanh":
            y = ad.tanh(y)
        return ad.reshape(y, (-1,)) if squeeze else y


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class LSTM(Layer):
    """Unidirectional LSTM with gate order (input, forget, candidate, output)."""

    _params = ("w_input", "w_hidden", "bias")

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.hidden = hidden
        self.w_input = ad.parameter(xavier_uniform((4 * hidden, in_dim), rng))
        self.w_hidden = ad.parameter(xavier_uniform((4 * hidden, hidden), rng))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = forget_bias
        self.bias = ad.parameter(bias)

    def zero_state(self, batch: int) -> Tuple[Tensor, Tensor]:
        z = Tensor(np.zeros((batch, self.hidden)))
        return z, z

    def step(self, x_proj: Tensor, state: Tuple[Tensor, Tensor], w_hidden_t: Optional[Tensor] = None):
        """Advance one step given the already projected input ``x W_input^T + b``."""
        h, c = state
        if w_hidden_t is None:
            w_hidden_t = ad.transpose(self.w_hidden)
        H = self.hidden
        z = x_proj + ad.matmul(h, w_hidden_t)
        gates = ad.sigmoid(z[:, : 2 * H])
        i, f = gates[:, :H], gates[:, H:]
        g = ad.tanh(z[:, 2 * H : 3 * H])
        o = ad.sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * ad.tanh(c)
        return h, c

    def project(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(self.w_input)) + self.bias

    def __call__(self, x: Tensor, state=None):
        """Run over ``x`` shaped (batch, time, in); returns (outputs, per-step cells)."""
        batch, steps = x.shape[0], x.shape[1]
        if steps == 0:
            raise ValueError("LSTM needs a sequence of length >= 1")
        proj = self.project(x)
        w_hidden_t = ad.transpose(self.w_hidden)
        state = state or self.zero_state(batch)
        hs, cs = [], []
        for t in range(steps):
            state = self.step(proj[:, t], state, w_hidden_t)
            hs.append(state[0])
            cs.append(state[1])
        return ad.stack(hs, axis=1), ad.stack(cs, axis=1)


def reverse_index(lengths: np.ndarray, steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Index arrays that reverse each row within its own length.

    Padding positions map to themselves, so applying the index twice is the
    identity.
    """
    lengths = np.asarray(lengths)
    t = np.arange(steps)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.broadcast_to(np.arange(len(lengths))[:, None], idx.shape)
    return rows, idx


class BiLSTM(Layer):
    """Forward and backward LSTMs whose outputs are concatenated per step."""

    _children = ("forward", "backward")

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.forward = LSTM(in_dim, hidden, rng)
        self.backward = LSTM(in_dim, hidden, rng)

    def __call__(
        self,
        x: Tensor,
        lengths=None,
        dropout: float = 0.0,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        return_final: bool = False,
    ):
        batch, steps = x.shape[0], x.shape[1]
        if lengths is None:
            lengths = np.full(batch, steps)
        lengths = np.asarray(lengths)
        fwd, _ = self.forward(x)
        index = reverse_index(lengths, steps)
        bwd_rev, _ = self.backward(x[index])
        bwd = bwd_rev[index]
        out = ad.dropout(ad.concat([fwd, bwd], axis=-1), dropout, training, rng)
        if not return_final:
            return out
        # final forward state sits at length-1, final backward state at position 0
        H = self.forward.hidden
        last = np.maximum(lengths - 1, 0)
        final = ad.concat([out[np.arange(batch), last, :H], out[:, 0, H:]], axis=-1)
        return out, final


def bilstm_forward(
    lstm: BiLSTM,
    inputs: Sequence[Tensor],
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> List[Tensor]:
    if len(inputs) == 0:
        raise ValueError("bilstm_forward needs a non-empty sequence")
    x = ad.reshape(ad.stack(list(inputs), axis=0), (1, len(inputs), -1))
    out = lstm(x, dropout=dropout, training=training, rng=rng)
    return [out[0, t] for t in range(len(inputs))]


class Bilinear(Layer):
    """``logit(q, k) = q^T B k``."""

    _params = ("weight",)

    def __init__(self, query_dim: int, key_dim: int, rng: np.random.Generator):
        self.weight = ad.parameter(xavier_uniform((query_dim, key_dim), rng))

    def __call__(self, queries: Tensor, keys: Tensor) -> Tensor:
        """Logits for (..., Tq, dq) queries against (..., Tk, dk) keys -> (..., Tq, Tk)."""
        return ad.matmul(ad.matmul(queries, self.weight), ad.transpose(keys))


def bilinear_attention(
    form: Bilinear, query: Tensor, keys: Sequence[Tensor], key_mask=None
) -> Tuple[Tensor, Tensor]:
    """Attend from one query vector over a list of keys; returns (weights, context)."""
    if len(keys) == 0:
        raise ad.EmptySupportError("attention over an empty key list")
    key_mat = ad.stack(list(keys), axis=0)
    logits = form(ad.reshape(query, (1, -1)), key_mat)
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None, :]
    weights = ad.softmax_masked(logits, mask, axis=-1)
    context = ad.matmul(weights, key_mat)
    return ad.reshape(weights, (-1,)), ad.reshape(context, (-1,))


def joint_features(h: Tensor, c: Tensor) -> Tensor:
    """``[h; c; h - c; h * c]`` along the last axis."""
    if h.shape != c.shape:
        raise ValueError(f"fusion operands differ in shape: {h.shape} vs {c.shape}")
    return ad.concat([h, c, h - c, h * c], axis=-1)


def fuse_joint(layer: Linear, h: Tensor, c: Tensor) -> Tensor:
    """``relu(W [h; c; h - c; h * c])``."""
    if layer.in_dim != 4 * h.shape[-1]:
        raise ValueError(f"fusion layer expects input dim {layer.in_dim}, got 4 x {h.shape[-1]}")
    return ad.relu(layer(joint_features(h, c)))

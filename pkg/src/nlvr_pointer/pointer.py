"""Pointer network that orders the objects of each sub-image, conditioned on the statement.

The encoder reads the projected objects (projection shared with the OBJ-LSTM),
and the decoder emits one object per step, masking those already chosen.  At
each step the decoder input is the previous choice's embedding (a learned start
vector at step 0) concatenated with a bilinear-attention summary of the
LANG-LSTM outputs.

Decoding is batched over sub-image rows; rows with fewer objects than the
longest row simply stop contributing once all their objects are placed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LSTM, Bilinear, Layer, Linear
from .optim import xavier_uniform

MODES = ("sample", "greedy", "teacher")


@dataclass
class Permutation:
    order: List[int]
    log_prob: float
    step_probs: List[float] = field(default_factory=list)

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError(f"{self.order} is not a permutation")


@dataclass
class Decoded:
    """Batched decode result."""

    orders: np.ndarray  # (S, N); identity on padding
    log_prob: Tensor  # (S,)
    step_probs: np.ndarray  # (S, N); 1.0 on inactive steps
    lengths: np.ndarray  # (S,)

    def permutation(self, row: int) -> Permutation:
        n = int(self.lengths[row])
        return Permutation(
            [int(i) for i in self.orders[row, :n]],
            float(self.log_prob.data[row]),
            [float(p) for p in self.step_probs[row, :n]],
        )


class DecodeState:
    """Decoder recurrent state plus the already-selected mask."""

    def __init__(self, hidden: Tensor, cell: Tensor, selected: np.ndarray, step: int = 0):
        self.hidden, self.cell, self.selected, self.step = hidden, cell, selected, step


class PointerNet(Layer):
    _params = ("start",)
    _children = ("encoder", "decoder", "pointer_attn", "lang_attn")

    def __init__(self, projection: Linear, lang_dim: int, hidden: int, rng: np.random.Generator):
        # the projection belongs to the comprehension model; it is not re-registered here
        self.projection = projection
        obj_dim = projection.out_dim
        self.encoder = LSTM(obj_dim, hidden, rng)
        self.decoder = LSTM(obj_dim + lang_dim, hidden, rng)
        self.pointer_attn = Bilinear(hidden, hidden, rng)
        self.lang_attn = Bilinear(hidden, lang_dim, rng)
        self.start = ad.parameter(xavier_uniform((obj_dim,), rng))

    # ------------------------------------------------------------ pieces

    def encode(self, objects, object_mask):
        """Encoder outputs (S, N, H) and the initial decoder state."""
        object_mask = np.asarray(object_mask, dtype=bool)
        S, N = object_mask.shape
        embedded = self.projection(ad.as_tensor(objects))
        enc, cells = self.encoder(embedded)
        last = np.maximum(object_mask.sum(axis=1) - 1, 0)
        rows = np.arange(S)
        state = DecodeState(enc[rows, last], cells[rows, last], np.zeros((S, N), dtype=bool))
        return embedded, enc, state

    def decode_step(self, state: DecodeState, embedded, enc, object_mask, lang, token_mask, previous):
        """One decoder step; returns the masked distribution over objects and the new state.

        ``previous`` holds the index chosen at the last step per row (ignored at
        step 0, where the start vector is fed instead).
        """
        object_mask = np.asarray(object_mask, dtype=bool)
        S = object_mask.shape[0]
        available = object_mask & ~state.selected
        if not available.any():
            raise ValueError("decode_step called after every object was selected")
        query = ad.reshape(state.hidden, (S, 1, -1))
        lang_weights = ad.softmax_masked(self.lang_attn(query, lang), token_mask[:, None, :], axis=-1)
        context = ad.reshape(ad.matmul(lang_weights, lang), (S, -1))
        if state.step == 0:
            prev = ad.matmul(Tensor(np.ones((S, 1))), ad.reshape(self.start, (1, -1)))
        else:
            prev = embedded[np.arange(S), previous]
        x = self.decoder.project(ad.concat([prev, context], axis=-1))
        hidden, cell = self.decoder.step(x, (state.hidden, state.cell))
        logits = ad.reshape(self.pointer_attn(ad.reshape(hidden, (S, 1, -1)), enc), (S, -1))
        probs = ad.softmax_masked(logits, available, axis=-1, allow_empty=True)
        return probs, DecodeState(hidden, cell, state.selected.copy(), state.step + 1)

    # ------------------------------------------------------------ full decode

    def decode(
        self,
        objects,
        object_mask,
        lang: Tensor,
        token_mask,
        mode: str = "greedy",
        rng: Optional[np.random.Generator] = None,
        orders: Optional[np.ndarray] = None,
    ) -> Decoded:
        """Decode every row of ``objects`` (S, N, 9).

        ``lang`` (S, T, D) and ``token_mask`` (S, T) are the statement encodings
        aligned with the rows.  ``mode`` is ``sample`` (needs ``rng``),
        ``greedy`` (arg-max, ties to the lowest index) or ``teacher`` (score the
        given ``orders``).
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        object_mask = np.asarray(object_mask, dtype=bool)
        token_mask = np.asarray(token_mask, dtype=bool)
        S, N = object_mask.shape
        lengths = object_mask.sum(axis=1)
        if mode == "teacher":
            orders = np.asarray(orders)
            for r in range(S):
                n = lengths[r]
                if sorted(orders[r, :n].tolist()) != list(range(n)):
                    raise ValueError(f"row {r}: {orders[r, :n].tolist()} is not a permutation")
        out_orders = np.broadcast_to(np.arange(N), (S, N)).copy()
        step_probs = np.ones((S, N))
        log_terms = []
        rows = np.arange(S)
        if N == 0 or lengths.max() == 0:
            return Decoded(out_orders, Tensor(np.zeros(S)), step_probs, lengths)

        embedded, enc, state = self.encode(objects, object_mask)
        chosen = np.zeros(S, dtype=np.int64)
        for t in range(int(lengths.max())):
            probs, state = self.decode_step(state, embedded, enc, object_mask, lang, token_mask, chosen)
            active = t < lengths
            p = probs.data
            if mode == "teacher":
                pick = orders[:, t].astype(np.int64)
            elif mode == "greedy":
                pick = np.argmax(np.where(p > 0, p, -1.0), axis=1)
            else:
                pick = _sample_rows(p, rng)
            chosen = np.where(active, pick, 0)
            out_orders[active, t] = chosen[active]
            state.selected[rows[active], chosen[active]] = True
            picked = probs[rows, chosen]
            step_probs[active, t] = picked.data[active]
            # inactive rows contribute log(1) = 0
            log_terms.append(ad.log(picked * active + (1.0 - active)))
        log_prob = ad.sum(ad.stack(log_terms, axis=1), axis=1)
        return Decoded(out_orders, log_prob, step_probs, lengths)


def _sample_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; rows with no mass return 0."""
    u = rng.random(p.shape[0])
    cdf = np.cumsum(p, axis=1)
    pick = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    # guard against landing on a zero-probability tail through rounding
    last_valid = p.shape[1] - 1 - np.argmax((p > 0)[:, ::-1], axis=1)
    return np.minimum(pick, last_valid)


# ---------------------------------------------------------------- single-row API


def _single(objects, lang):
    objects = np.asarray(objects, dtype=np.float64).reshape(1, -1, 9)
    lang = ad.as_tensor(lang)
    if lang.ndim == 2:
        lang = ad.reshape(lang, (1,) + lang.shape)
    return objects, np.ones(objects.shape[:2], dtype=bool), lang, np.ones(lang.shape[:2], dtype=bool)


def pointer_encode(net: PointerNet, objects) -> Tensor:
    """Encoder hidden states (N, H) for one sub-image."""
    objects, mask, _, _ = _single(objects, np.zeros((1, 1)))
    if mask.shape[1] == 0:
        raise ValueError("pointer_encode needs at least one object")
    _, enc, _ = net.encode(objects, mask)
    return enc[0]


def sample_permutation(net: PointerNet, objects, lang, rng: np.random.Generator) -> Permutation:
    objects, mask, lang, tmask = _single(objects, lang)
    return net.decode(objects, mask, lang, tmask, "sample", rng).permutation(0)


def greedy_permutation(net: PointerNet, objects, lang) -> Permutation:
    objects, mask, lang, tmask = _single(objects, lang)
    return net.decode(objects, mask, lang, tmask, "greedy").permutation(0)


def permutation_log_prob(net: PointerNet, objects, lang, order: Sequence[int]) -> Tensor:
    """Differentiable log p(order | statement, objects) via teacher forcing."""
    objects, mask, lang, tmask = _single(objects, lang)
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(mask.shape[1])):
        raise ValueError(f"{order.tolist()} is not a permutation of {mask.shape[1]} objects")
    return net.decode(objects, mask, lang, tmask, "teacher", orders=order[None]).log_prob[0]


def rl_surrogate_loss(log_prob, reward, baseline):
    """``-(R - b) * log p``; reward and baseline are constants (scalars or per-row arrays)."""
    advantage = np.asarray(reward, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    return log_prob * (-advantage)


def log_uniform_permutation(n: int) -> float:
    return -math.lgamma(n + 1)

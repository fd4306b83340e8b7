"""The joint bidirectional-attention comprehension model and the BiENC ablation.

All computation is batched: a batch of ``B`` statements owns ``3B`` sub-images,
flattened to rows ``3b + j``.  Each sub-image is scored independently with the
same weights, then the three scores are pooled (max by default) and squashed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FEATURE_DIM, NUM_SUBIMAGES, Batch, EncodedExample, collate
from .layers import BiLSTM, Bilinear, Embedding, Layer, Linear, fuse_joint

PROB_EPS = 1e-12
SCORERS = ("biatt", "bienc")
POOLING = ("max", "mean")


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden: int = 256
    object_dim: int = 64
    joint_dim: int = 512
    mlp_dim: int = 512
    dropout: float = 0.3
    pooling: str = "max"
    scorer: str = "biatt"

    def __post_init__(self):
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Forward:
    """Result of a batched forward pass."""

    scores: Tensor  # (B, 3)
    pooled: Tensor  # (B,)
    prob: Tensor  # (B,)
    alpha: Optional[np.ndarray] = None  # (3B, T, N) word -> object
    beta: Optional[np.ndarray] = None  # (3B, N, T) object -> word


@dataclass
class SubImageDecision:
    score: float
    alpha: np.ndarray
    beta: np.ndarray


@dataclass
class ModelOutput:
    probability: float
    decisions: List[SubImageDecision]
    chosen: int

    @property
    def scores(self) -> List[float]:
        return [d.score for d in self.decisions]

    @property
    def label(self) -> int:
        return int(self.probability >= 0.5)


def sigmoid(x: float) -> float:
    return float(ad._sigmoid(np.asarray(x, dtype=float)))


def comprehension_loss(prob: Tensor, labels) -> Tensor:
    """Per-example cross entropy with probabilities clamped away from 0 and 1."""
    prob = ad.as_tensor(prob)
    y = np.asarray(labels, dtype=np.float64)
    p = ad.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    return -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))


def pool_scores(scores: Tensor, mode: str = "max") -> Tensor:
    """Combine the (B, 3) sub-image scores into one logit per example."""
    if mode == "max":
        return ad.masked_max(scores, axis=1)
    # sum in sorted order so the result does not depend on sub-image order
    order = np.argsort(scores.data, axis=1, kind="stable")
    return ad.mean(scores[np.arange(scores.shape[0])[:, None], order], axis=1)


class BiattModel(Layer):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = c = config
        two_h = 2 * c.hidden
        self.embedding = Embedding(c.vocab_size, c.embed_dim, rng)
        self.object_proj = Linear(FEATURE_DIM, c.object_dim, rng)
        self.lang_lstm = BiLSTM(c.embed_dim, c.hidden, rng)
        self.obj_lstm = BiLSTM(c.object_dim, c.hidden, rng)
        children = ["embedding", "object_proj", "lang_lstm", "obj_lstm"]
        if c.scorer == "biatt":
            self.attn_words = Bilinear(two_h, two_h, rng)
            self.attn_objects = Bilinear(two_h, two_h, rng)
            self.fuse_lang = Linear(4 * two_h, c.joint_dim, rng, bias=False)
            self.fuse_obj = Linear(4 * two_h, c.joint_dim, rng, bias=False)
            self.post_lang = BiLSTM(c.joint_dim, c.hidden, rng)
            self.post_obj = BiLSTM(c.joint_dim, c.hidden, rng)
            self.score_hidden = Linear(2 * two_h, c.mlp_dim, rng, activation="tanh")
            self.score_out = Linear(c.mlp_dim, 1, rng, bias=False)
            children += [
                "attn_words", "attn_objects", "fuse_lang", "fuse_obj",
                "post_lang", "post_obj", "score_hidden", "score_out",
            ]
        else:
            self.similarity = Bilinear(two_h, two_h, rng)
            children.append("similarity")
        self._children = tuple(children)

    # ------------------------------------------------------------ encoders

    def encode_statement(self, tokens, token_mask, training=False, rng=None, return_final=False):
        """LANG-LSTM outputs (B, T, 2H) for padded token ids."""
        lengths = np.asarray(token_mask).sum(axis=1)
        if np.any(lengths == 0):
            raise ValueError("every statement needs at least one token")
        words = self.embedding(tokens)
        return self.lang_lstm(
            words, lengths, self.config.dropout, training, rng, return_final=return_final
        )

    def embed_objects(self, objects) -> Tensor:
        """Shared 9 -> object_dim projection without nonlinearity."""
        return self.object_proj(ad.as_tensor(objects))

    def encode_objects(self, objects, object_mask, training=False, rng=None, return_final=False):
        """OBJ-LSTM outputs (S, N, 2H) for rows of (possibly reordered) objects."""
        lengths = np.asarray(object_mask).sum(axis=1)
        return self.obj_lstm(
            self.embed_objects(objects), lengths, self.config.dropout, training, rng,
            return_final=return_final,
        )

    # ------------------------------------------------------------ forward

    def forward(
        self,
        tokens,
        token_mask,
        objects,
        object_mask,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        lang: Optional[Tensor] = None,
    ) -> Forward:
        """Score a batch.

        ``objects`` is (B, 3, N, 9) with ``object_mask`` (B, 3, N); rows must
        already be in the order the OBJ-LSTM should read them.  ``lang`` may
        carry precomputed LANG-LSTM outputs so the pointer network and the
        comprehension model share one statement encoding.
        """
        tokens, token_mask = np.asarray(tokens), np.asarray(token_mask, dtype=bool)
        objects, object_mask = np.asarray(objects), np.asarray(object_mask, dtype=bool)
        B, _, N = object_mask.shape
        S = B * NUM_SUBIMAGES
        owner = np.repeat(np.arange(B), NUM_SUBIMAGES)
        flat_objects = objects.reshape(S, N, FEATURE_DIM)
        flat_mask = object_mask.reshape(S, N)
        sub_tokens = token_mask[owner]

        if self.config.scorer == "bienc":
            _, lang_final = self.encode_statement(tokens, token_mask, training, rng, return_final=True)
            _, obj_final = self.encode_objects(flat_objects, flat_mask, training, rng, return_final=True)
            sim = ad.sum(ad.matmul(lang_final[owner], self.similarity.weight) * obj_final, axis=-1)
            scores = sim * flat_mask.any(axis=1)
            return self._finish(ad.reshape(scores, (B, NUM_SUBIMAGES)))

        if lang is None:
            lang = self.encode_statement(tokens, token_mask, training, rng)
        h = lang[owner]  # (S, T, 2H)
        g = self.encode_objects(flat_objects, flat_mask, training, rng)  # (S, N, 2H)
        h_joint, g_joint, alpha, beta = self.fuse(h, g, sub_tokens, flat_mask)
        h_bar, g_bar = self.pool(h_joint, g_joint, sub_tokens, flat_mask, training, rng)

        empty = ~flat_mask.any(axis=1)
        if empty.any():
            # no objects: skip fusion, pool the raw statement encoding, g_bar stays 0
            h_raw = ad.masked_max(h, sub_tokens[:, :, None], axis=1)
            keep = (~empty)[:, None].astype(float)
            h_bar = h_bar * keep + h_raw * (1.0 - keep)

        scores = ad.reshape(self.score(h_bar, g_bar, training, rng), (B, NUM_SUBIMAGES))
        out = self._finish(scores)
        out.alpha, out.beta = alpha.data, beta.data
        return out

    def fuse(self, h: Tensor, g: Tensor, token_mask, object_mask):
        """Bidirectional attention and four-way fusion for (S, T, D) words and (S, N, D) objects.

        Returns the joint word and object representations plus the attention
        weights alpha (S, T, N) and beta (S, N, T).  Rows without objects get
        all-zero alpha rows and meaningless object outputs.
        """
        token_mask = np.asarray(token_mask, dtype=bool)
        object_mask = np.asarray(object_mask, dtype=bool)
        alpha = ad.softmax_masked(
            self.attn_words(h, g), object_mask[:, None, :], axis=-1, allow_empty=True
        )
        beta = ad.softmax_masked(self.attn_objects(g, h), token_mask[:, None, :], axis=-1)
        h_joint = fuse_joint(self.fuse_lang, h, ad.matmul(alpha, g))
        g_joint = fuse_joint(self.fuse_obj, g, ad.matmul(beta, h))
        return h_joint, g_joint, alpha, beta

    def pool(self, h_joint: Tensor, g_joint: Tensor, token_mask, object_mask, training=False, rng=None):
        """Post-fusion BiLSTMs followed by masked element-wise max; empty object rows pool to 0."""
        token_mask = np.asarray(token_mask, dtype=bool)
        object_mask = np.asarray(object_mask, dtype=bool)
        drop = self.config.dropout
        h_mem = self.post_lang(h_joint, token_mask.sum(axis=1), drop, training, rng)
        g_mem = self.post_obj(g_joint, object_mask.sum(axis=1), drop, training, rng)
        h_bar = ad.masked_max(h_mem, token_mask[:, :, None], axis=1)
        g_bar = ad.masked_max(g_mem, object_mask[:, :, None], axis=1, allow_empty=True)
        return h_bar, g_bar

    def score(self, h_bar: Tensor, g_bar: Tensor, training=False, rng=None) -> Tensor:
        """``W2 tanh(W1 [h_bar; g_bar] + b1)`` per row, with dropout on the MLP input."""
        features = ad.dropout(ad.concat([h_bar, g_bar], axis=-1), self.config.dropout, training, rng)
        return ad.reshape(self.score_out(self.score_hidden(features)), (-1,))

    def _finish(self, scores: Tensor) -> Forward:
        pooled = pool_scores(scores, self.config.pooling)
        return Forward(scores, pooled, ad.sigmoid(pooled))

    def forward_batch(self, batch: Batch, orders=None, training=False, rng=None, lang=None) -> Forward:
        objects, mask = batch.objects, batch.object_mask
        if orders is not None:
            objects = reorder_objects(objects, orders)
        return self.forward(batch.tokens, batch.token_mask, objects, mask, training, rng, lang)


def reorder_objects(objects: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Permute objects along the N axis: ``out[..., t, :] = objects[..., orders[..., t], :]``.

    ``orders`` must be the identity on padding positions.
    """
    return np.take_along_axis(objects, np.asarray(orders)[..., None], axis=-2)


def identity_orders(object_mask: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.arange(object_mask.shape[-1]), object_mask.shape).copy()


def orders_from_lists(orders: Sequence[Sequence[int]], object_mask: np.ndarray) -> np.ndarray:
    """Pad per-sub-image orders of one example into a (1, 3, N) index array."""
    full = identity_orders(object_mask[None])
    for j, order in enumerate(orders):
        full[0, j, : len(order)] = order
    return full


def predict_example(
    model: BiattModel,
    example: EncodedExample,
    orders: Optional[Sequence[Sequence[int]]] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ModelOutput:
    """Run one example; ``orders`` gives per-sub-image object orders (dataset order if None)."""
    batch = collate([example])
    full_orders = None if orders is None else orders_from_lists(orders, batch.object_mask[0])
    with ad.no_grad():
        out = model.forward_batch(batch, full_orders, training, rng)
    return to_outputs(out, batch)[0]


def to_outputs(out: Forward, batch: Batch) -> List[ModelOutput]:
    results = []
    counts = batch.object_counts
    lengths = batch.token_lengths
    for b in range(len(batch)):
        decisions = []
        for j in range(NUM_SUBIMAGES):
            row = NUM_SUBIMAGES * b + j
            n, t = counts[b, j], lengths[b]
            alpha = out.alpha[row, :t, :n] if out.alpha is not None else np.zeros((t, n))
            beta = out.beta[row, :n, :t] if out.beta is not None else np.zeros((n, t))
            decisions.append(SubImageDecision(float(out.scores.data[b, j]), alpha, beta))
        chosen = int(np.argmax(out.scores.data[b]))
        results.append(ModelOutput(float(out.prob.data[b]), decisions, chosen))
    return results

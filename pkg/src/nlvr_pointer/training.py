"""Joint training of the comprehension model and the pointer network."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import COLORS, NUM_SUBIMAGES, SHAPES, Batch, EncodedExample, Vocabulary, make_batches
from .model import BiattModel, ModelConfig, ModelOutput, comprehension_loss, to_outputs
from .optim import AdamState, adam_step, clip_by_global_norm, global_norm
from .pointer import Decoded, PointerNet, rl_surrogate_loss

logger = logging.getLogger(__name__)

MODELS = ("biatt-pointer", "biatt", "bienc")
FEATURE_LAYOUT = {"shapes": list(SHAPES), "colors": list(COLORS)}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, identifiers: Sequence[str]):
        self.step = step
        self.identifiers = list(identifiers)
        super().__init__(f"non-finite loss at step {step}; examples: {', '.join(self.identifiers)}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    dropout: float = 0.3
    clip_norm: float = 5.0
    batch_size: int = 32
    max_epochs: int = 30
    seed: int = 0
    pooling: str = "max"
    model: str = "biatt-pointer"
    pointer_enabled: bool = True
    encoder_order_randomized: bool = False
    shuffle: bool = True
    min_count: int = 3
    embed_dim: int = 128
    hidden: int = 256
    object_dim: int = 64
    joint_dim: int = 512
    mlp_dim: int = 512
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    test_path: Optional[str] = None
    vocab_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.model != "biatt-pointer":
            self.pointer_enabled = False
        if self.lr < 0 or self.clip_norm <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr >= 0, clip_norm > 0, batch_size >= 1 and max_epochs >= 0 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            object_dim=self.object_dim,
            joint_dim=self.joint_dim,
            mlp_dim=self.mlp_dim,
            dropout=self.dropout,
            pooling=self.pooling,
            scorer="bienc" if self.model == "bienc" else "biatt",
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class Metrics:
    split: str
    accuracy: float
    loss: float
    count: int
    correct: int
    history: List[Dict] = field(default_factory=list)


@dataclass
class StepMetrics:
    step: int
    loss: float
    comprehension_loss: float
    accuracy: float
    grad_norm: float


# ---------------------------------------------------------------- parameter helpers


def named_parameters(model: BiattModel, pointer: Optional[PointerNet]) -> Dict[str, ad.Tensor]:
    params = dict(model.named_parameters())
    if pointer is not None:
        params.update(pointer.named_parameters("pointer."))
    return params


def build_models(config: TrainConfig, vocab_size: int, rng: np.random.Generator):
    model = BiattModel(config.model_config(vocab_size), rng)
    pointer = None
    if config.pointer_enabled:
        pointer = PointerNet(model.object_proj, 2 * config.hidden, config.hidden, rng)
    return model, pointer


# ---------------------------------------------------------------- batched pieces


def decode_orders(
    model: BiattModel,
    pointer: PointerNet,
    batch: Batch,
    lang: ad.Tensor,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Decoded]:
    """Run the pointer over all 3B sub-images; returns orders shaped (B, 3, N)."""
    B, _, N = batch.object_mask.shape
    owner = np.repeat(np.arange(B), NUM_SUBIMAGES)
    decoded = pointer.decode(
        batch.objects.reshape(B * NUM_SUBIMAGES, N, -1),
        batch.object_mask.reshape(B * NUM_SUBIMAGES, N),
        lang[owner],
        batch.token_mask[owner],
        mode,
        rng,
    )
    return decoded.orders.reshape(B, NUM_SUBIMAGES, N), decoded


def shuffle_objects(batch: Batch, rng: np.random.Generator) -> Batch:
    """Randomly permute the objects inside every sub-image (padding untouched)."""
    objects = batch.objects.copy()
    for b in range(len(batch)):
        for j in range(NUM_SUBIMAGES):
            n = int(batch.object_mask[b, j].sum())
            objects[b, j, :n] = objects[b, j, rng.permutation(n)]
    return Batch(batch.identifiers, batch.tokens, batch.token_mask, objects, batch.object_mask, batch.labels)


def train_step(
    model: BiattModel,
    pointer: Optional[PointerNet],
    batch: Batch,
    config: TrainConfig,
    rng: np.random.Generator,
    adam: AdamState,
    step: int = 0,
) -> StepMetrics:
    """One optimization step on ``batch``.

    With the pointer enabled each sub-image gets one sampled order and one
    greedy order.  The greedy pass (inference mode, no gradients) supplies the
    self-critical baseline, so the per-example objective is

        L(sampled) + (L(sampled) - L(greedy)) * sum_j log p(order_j)

    where the bracket is a constant.  Losses are averaged over the batch.
    """
    params = named_parameters(model, pointer)
    for p in params.values():
        p.zero_grad()
    if config.encoder_order_randomized:
        batch = shuffle_objects(batch, rng)

    lang = model.encode_statement(batch.tokens, batch.token_mask, training=True, rng=rng)
    if pointer is not None and config.pointer_enabled:
        with ad.no_grad():
            lang_eval = model.encode_statement(batch.tokens, batch.token_mask, training=False)
            greedy, _ = decode_orders(model, pointer, batch, lang_eval, "greedy")
            baseline_loss = comprehension_loss(
                model.forward_batch(batch, greedy, training=False, lang=lang_eval).prob, batch.labels
            ).data
        sampled, decoded = decode_orders(model, pointer, batch, lang, "sample", rng)
        out = model.forward_batch(batch, sampled, training=True, rng=rng, lang=lang)
        losses = comprehension_loss(out.prob, batch.labels)
        log_prob = ad.sum(ad.reshape(decoded.log_prob, (len(batch), NUM_SUBIMAGES)), axis=1)
        # reward is the negative comprehension loss, baseline the greedy decode's reward
        total = losses + rl_surrogate_loss(log_prob, -losses.data, -baseline_loss)
    else:
        out = model.forward_batch(batch, None, training=True, rng=rng, lang=lang)
        losses = comprehension_loss(out.prob, batch.labels)
        total = losses
    loss = ad.mean(total)
    if not np.isfinite(loss.item()):
        bad = [batch.identifiers[i] for i in np.flatnonzero(~np.isfinite(total.data))]
        raise NonFiniteLoss(step, bad or batch.identifiers)
    loss.backward()

    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    norm = global_norm(grads)
    grads = clip_by_global_norm(grads, config.clip_norm)
    adam_step({name: p.data for name, p in params.items()}, grads, adam, config.lr)
    predicted = out.prob.data >= 0.5
    return StepMetrics(
        step=step,
        loss=loss.item(),
        comprehension_loss=float(losses.data.mean()),
        accuracy=float(np.mean(predicted == (batch.labels > 0.5))),
        grad_norm=norm,
    )


@dataclass
class Prediction:
    identifier: str
    label: int
    output: ModelOutput
    orders: List[List[int]]
    loss: float


def predict(
    model: BiattModel,
    pointer: Optional[PointerNet],
    examples: Sequence[EncodedExample],
    batch_size: int = 32,
) -> List[Prediction]:
    """Inference-mode predictions in input order; the pointer decodes greedily."""
    results = []
    with ad.no_grad():
        for batch in make_batches(examples, batch_size):
            lang = model.encode_statement(batch.tokens, batch.token_mask, training=False)
            orders = None
            if pointer is not None:
                orders, _ = decode_orders(model, pointer, batch, lang, "greedy")
            out = model.forward_batch(batch, orders, training=False, lang=lang)
            losses = comprehension_loss(out.prob, batch.labels).data
            counts = batch.object_counts
            for b, output in enumerate(to_outputs(out, batch)):
                per_sub = [
                    [int(i) for i in (orders[b, j, : counts[b, j]] if orders is not None else range(counts[b, j]))]
                    for j in range(NUM_SUBIMAGES)
                ]
                results.append(
                    Prediction(batch.identifiers[b], int(batch.labels[b]), output, per_sub, float(losses[b]))
                )
    return results


def evaluate(
    model: BiattModel,
    pointer: Optional[PointerNet],
    examples: Sequence[EncodedExample],
    split: str = "dev",
    batch_size: int = 32,
) -> Metrics:
    if len(examples) == 0:
        raise ValueError(f"cannot evaluate on an empty {split} set")
    preds = predict(model, pointer, examples, batch_size)
    correct = sum(p.output.label == p.label for p in preds)
    loss = float(np.mean([p.loss for p in preds]))
    return Metrics(split, correct / len(preds), loss, len(preds), correct)


# ---------------------------------------------------------------- trainer


class Trainer:
    """Owns parameters, optimizer state, generator state and counters."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        init_rng = np.random.default_rng([config.seed, 0])
        self.model, self.pointer = build_models(config, len(vocab), init_rng)
        self.adam = AdamState()
        self.rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0
        self.step = 0
        self.best_dev = -1.0
        self.history: List[Dict] = []

    @property
    def params(self) -> Dict[str, ad.Tensor]:
        return named_parameters(self.model, self.pointer)

    def train_step(self, batch: Batch) -> StepMetrics:
        metrics = train_step(self.model, self.pointer, batch, self.config, self.rng, self.adam, self.step)
        self.step += 1
        return metrics

    def epoch_batches(self, examples: Sequence[EncodedExample]) -> List[Batch]:
        order_rng = np.random.default_rng([self.config.seed, 2, self.epoch])
        return make_batches(examples, self.config.batch_size, self.config.shuffle, order_rng)

    def train_epoch(self, examples: Sequence[EncodedExample]) -> Dict:
        batches = self.epoch_batches(examples)
        steps = [self.train_step(b) for b in batches]
        sizes = np.array([len(b) for b in batches], dtype=float)
        self.epoch += 1
        return {
            "epoch": self.epoch,
            "step": self.step,
            "train_loss": float(np.average([s.loss for s in steps], weights=sizes)),
            "train_batch_accuracy": float(np.average([s.accuracy for s in steps], weights=sizes)),
        }

    def evaluate(self, examples, split="dev") -> Metrics:
        return evaluate(self.model, self.pointer, examples, split, self.config.batch_size)

    def fit(
        self,
        train: Sequence[EncodedExample],
        dev: Optional[Sequence[EncodedExample]] = None,
        emit: Callable[[Dict], None] = None,
    ) -> Metrics:
        """Train for ``max_epochs``; keeps the best dev checkpoint if a path is configured."""
        emit = emit or (lambda record: print(json.dumps(record), flush=True))
        dev = dev if dev else None
        if self.epoch == 0:
            record = {"epoch": 0, "step": self.step}
            self._eval_and_keep(dev, record)
            self._emit(record, emit)
        while self.epoch < self.config.max_epochs:
            record = self.train_epoch(train)
            self._eval_and_keep(dev, record)
            self._emit(record, emit)
        best = self.best_dev if dev is not None else float("nan")
        return Metrics("dev", best, float("nan"), len(dev or []), 0, list(self.history))

    def _eval_and_keep(self, dev, record: Dict) -> None:
        if dev is not None:
            m = self.evaluate(dev)
            record.update(dev_accuracy=m.accuracy, dev_loss=m.loss, dev_count=m.count)
            improved = m.accuracy > self.best_dev
            if improved:
                self.best_dev = m.accuracy
            record["best_dev_accuracy"] = self.best_dev
        else:
            improved = True
        if improved and self.config.checkpoint_path:
            save_checkpoint(self.config.checkpoint_path, self.checkpoint())

    def _emit(self, record: Dict, emit) -> None:
        self.history.append(record)
        emit(record)
        if self.config.metrics_path:
            with open(self.config.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    # ------------------------------------------------------------ persistence

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_dict(),
            model_config=self.model.config.to_dict(),
            vocab=list(self.vocab.tokens),
            params={name: p.data.copy() for name, p in self.params.items()},
            adam_t=self.adam.t,
            adam_m={k: v.copy() for k, v in self.adam.m.items()},
            adam_v={k: v.copy() for k, v in self.adam.v.items()},
            epoch=self.epoch,
            step=self.step,
            rng_state=self.rng.bit_generator.state,
            extra={"best_dev": self.best_dev, "history": self.history, "feature_layout": FEATURE_LAYOUT},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **overrides) -> "Trainer":
        layout = ckpt.extra.get("feature_layout", FEATURE_LAYOUT)
        if layout != FEATURE_LAYOUT:
            raise ValueError(f"checkpoint feature layout {layout} differs from {FEATURE_LAYOUT}")
        config = TrainConfig.from_dict({**ckpt.config, **overrides})
        trainer = cls(config, Vocabulary(list(ckpt.vocab)))
        params = trainer.params
        if set(params) != set(ckpt.params):
            missing = set(params) ^ set(ckpt.params)
            raise ValueError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
        for name, p in params.items():
            if p.data.shape != ckpt.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data[...] = ckpt.params[name]
        trainer.adam = AdamState(t=ckpt.adam_t, m={k: v.copy() for k, v in ckpt.adam_m.items()},
                                 v={k: v.copy() for k, v in ckpt.adam_v.items()})
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.epoch, trainer.step = ckpt.epoch, ckpt.step
        trainer.best_dev = ckpt.extra.get("best_dev", -1.0)
        trainer.history = list(ckpt.extra.get("history", []))
        return trainer

    @classmethod
    def load(cls, path, **overrides) -> "Trainer":
        return cls.from_checkpoint(load_checkpoint(path), **overrides)

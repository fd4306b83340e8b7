"""Reading, tokenizing, encoding and batching NLVR structured-representation examples."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_SUBIMAGES = 3
FEATURE_DIM = 9
SHAPES = ("square", "triangle", "circle")
COLORS = ("black", "yellow", "blue")
SIZES = (10, 20, 30)
PUNCTUATION = ".,;!?"
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
KNOWN_BLUE = {"blue", "#0099ff"}


class ParseError(ValueError):
    def __init__(self, message: str, identifier: Optional[str] = None):
        self.identifier = identifier
        super().__init__(f"{identifier}: {message}" if identifier else message)


@dataclass(frozen=True)
class RawObject:
    x: float
    y: float
    size: int
    shape: str
    color: str


@dataclass
class RawExample:
    sentence: str
    boxes: List[List[RawObject]]
    label: int
    identifier: str


@dataclass
class EncodedExample:
    identifier: str
    token_ids: np.ndarray
    subimages: List[np.ndarray]
    label: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodedExample):
            return NotImplemented
        return (
            self.identifier == other.identifier
            and self.label == other.label
            and np.array_equal(self.token_ids, other.token_ids)
            and len(self.subimages) == len(other.subimages)
            and all(np.array_equal(a, b) for a, b in zip(self.subimages, other.subimages))
        )


# ---------------------------------------------------------------- parsing


def _normalize_color(value: str, identifier: str) -> str:
    color = str(value).strip().lower()
    if color in ("black", "yellow"):
        return color
    if color not in KNOWN_BLUE:
        logger.warning("%s: unrecognized color %r mapped to blue", identifier, value)
    return "blue"


def _parse_object(obj: dict, identifier: str) -> RawObject:
    try:
        x, y = float(obj["x_loc"]), float(obj["y_loc"])
        size = int(obj["size"])
        shape = str(obj["type"]).strip().lower()
        color = obj["color"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad object {obj!r}: {exc}", identifier) from None
    if not (0 <= x <= 100 and 0 <= y <= 100):
        raise ParseError(f"object location ({x}, {y}) outside [0, 100]", identifier)
    if size not in SIZES:
        raise ParseError(f"object size {size} not in {SIZES}", identifier)
    if shape not in SHAPES:
        raise ParseError(f"object type {shape!r} not in {SHAPES}", identifier)
    return RawObject(x, y, size, shape, _normalize_color(color, identifier))


def parse_structured_json(line: str) -> RawExample:
    """Parse one JSONL record of the structured NLVR release."""
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object")
    identifier = str(record.get("identifier", "?"))
    for key in ("sentence", "label", "structured_rep"):
        if key not in record:
            raise ParseError(f"missing field {key!r}", identifier)
    label = str(record["label"]).strip().lower()
    if label not in ("true", "false"):
        raise ParseError(f"label {record['label']!r} is not true/false", identifier)
    boxes = record["structured_rep"]
    if not isinstance(boxes, list) or len(boxes) != NUM_SUBIMAGES:
        count = len(boxes) if isinstance(boxes, list) else "no"
        raise ParseError(f"expected 3 sub-images, got {count}", identifier)
    parsed = []
    for box in boxes:
        if not isinstance(box, list):
            raise ParseError("sub-image is not a list of objects", identifier)
        parsed.append([_parse_object(obj, identifier) for obj in box])
    return RawExample(str(record["sentence"]), parsed, int(label == "true"), identifier)


def read_corpus(path) -> List[RawExample]:
    """Parse every non-blank line of a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        return [parse_structured_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- text


def tokenize(sentence: str) -> List[str]:
    """Lowercase, split on whitespace and split off trailing ``. , ; ! ?``."""
    tokens = []
    for word in sentence.lower().split():
        tail = []
        while word and word[-1] in PUNCTUATION:
            tail.append(word[-1])
            word = word[:-1]
        if word:
            tokens.append(word)
        tokens.extend(reversed(tail))
    return tokens


@dataclass
class Vocabulary:
    tokens: List[str] = field(default_factory=lambda: [PAD, UNK])
    counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]], min_count: int = 3) -> "Vocabulary":
        counts = Counter()
        order = []
        for tokens in token_streams:
            for tok in tokens:
                if tok not in counts:
                    order.append(tok)
                counts[tok] += 1
        kept = [tok for tok in order if counts[tok] >= min_count and tok not in (PAD, UNK)]
        return cls([PAD, UNK] + kept, counts)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_text(self) -> str:
        return "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.tokens))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        rows = [line.split("\t") for line in text.splitlines() if line]
        rows.sort(key=lambda r: int(r[1]))
        tokens = [tok for tok, _ in rows]
        if [int(i) for _, i in rows] != list(range(len(rows))) or tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary file must list dense ids starting with <pad>, <unk>")
        return cls(tokens)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(examples: Iterable[RawExample], min_count: int = 3) -> Vocabulary:
    return Vocabulary.build((tokenize(ex.sentence) for ex in examples), min_count)


# ---------------------------------------------------------------- features


def encode_object(obj: RawObject) -> np.ndarray:
    """9 features: x, y in [-1, 1], size / 30, shape one-hot, color one-hot."""
    if not (0 <= obj.x <= 100 and 0 <= obj.y <= 100):
        raise ValueError(f"location ({obj.x}, {obj.y}) outside [0, 100]")
    if obj.size not in SIZES or obj.shape not in SHAPES or obj.color not in COLORS:
        raise ValueError(f"object attribute out of domain: {obj}")
    feature = np.zeros(FEATURE_DIM)
    feature[0] = obj.x / 50.0 - 1.0
    feature[1] = obj.y / 50.0 - 1.0
    feature[2] = obj.size / 30.0
    feature[3 + SHAPES.index(obj.shape)] = 1.0
    feature[6 + COLORS.index(obj.color)] = 1.0
    return feature


def encode_example(raw: RawExample, vocab: Vocabulary) -> EncodedExample:
    ids = np.asarray(vocab.encode(tokenize(raw.sentence)), dtype=np.int64)
    subimages = [
        np.stack([encode_object(o) for o in box]) if box else np.zeros((0, FEATURE_DIM))
        for box in raw.boxes
    ]
    return EncodedExample(raw.identifier, ids, subimages, int(raw.label))


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    identifiers: List[str]
    tokens: np.ndarray  # (B, T) int
    token_mask: np.ndarray  # (B, T) bool
    objects: np.ndarray  # (B, 3, N, 9)
    object_mask: np.ndarray  # (B, 3, N) bool
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.identifiers)

    @property
    def token_lengths(self) -> np.ndarray:
        return self.token_mask.sum(axis=1)

    @property
    def object_counts(self) -> np.ndarray:
        return self.object_mask.sum(axis=2)

    def unbatch(self) -> List[EncodedExample]:
        out = []
        for b, ident in enumerate(self.identifiers):
            subs = [self.objects[b, j, self.object_mask[b, j]] for j in range(NUM_SUBIMAGES)]
            out.append(EncodedExample(ident, self.tokens[b, self.token_mask[b]], subs, int(self.labels[b])))
        return out


def collate(examples: Sequence[EncodedExample]) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty list of examples")
    B = len(examples)
    T = max(1, max(len(ex.token_ids) for ex in examples))
    N = max(1, max(len(sub) for ex in examples for sub in ex.subimages))
    tokens = np.full((B, T), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((B, T), dtype=bool)
    objects = np.zeros((B, NUM_SUBIMAGES, N, FEATURE_DIM))
    object_mask = np.zeros((B, NUM_SUBIMAGES, N), dtype=bool)
    for b, ex in enumerate(examples):
        tokens[b, : len(ex.token_ids)] = ex.token_ids
        token_mask[b, : len(ex.token_ids)] = True
        for j, sub in enumerate(ex.subimages):
            objects[b, j, : len(sub)] = sub
            object_mask[b, j, : len(sub)] = True
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    return Batch([ex.identifier for ex in examples], tokens, token_mask, objects, object_mask, labels)


def make_batches(
    examples: Sequence[EncodedExample],
    batch_size: int,
    shuffle: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> List[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle:
        order = rng.permutation(len(examples))
    return [
        collate([examples[i] for i in order[start : start + batch_size]])
        for start in range(0, len(examples), batch_size)
    ]

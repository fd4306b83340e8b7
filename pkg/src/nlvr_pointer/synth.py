"""Generate a small NLVR-format structured corpus with programmatically true labels.

The real NLVR release is not redistributed with this package.  This generator
writes JSONL records with the same fields (``sentence``, ``label``,
``identifier``, ``structured_rep``) so the whole pipeline can be exercised
offline.  Statements are drawn from a handful of templates whose truth value
is computed from the scene, with labels balanced by rejection.

    python -m nlvr_pointer.synth --out train.jsonl --count 1000 --seed 0
"""

from __future__ import annotations

import argparse
import json
from typing import Callable, Dict, List, Tuple

import numpy as np

from .data import SHAPES, SIZES, RawExample, parse_structured_json

HEX_BLUE = "#0099ff"
COLOR_NAMES = {"black": "Black", "yellow": "Yellow", "blue": HEX_BLUE}
NUMBERS = ["zero", "one", "two", "three", "four", "five"]

Scene = List[List[Dict]]


def random_scene(rng: np.random.Generator, max_objects: int = 6) -> Scene:
    boxes = []
    for _ in range(3):
        box = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            size = int(rng.choice(SIZES))
            box.append(
                {
                    "x_loc": int(rng.integers(0, 101 - size)),
                    "y_loc": int(rng.integers(0, 101 - size)),
                    "size": size,
                    "type": str(rng.choice(SHAPES)),
                    "color": COLOR_NAMES[str(rng.choice(list(COLOR_NAMES)))],
                }
            )
        boxes.append(box)
    return boxes


def _color(obj: Dict) -> str:
    return {v: k for k, v in COLOR_NAMES.items()}[obj["color"]]


def _statement(rng: np.random.Generator, scene: Scene) -> Tuple[str, Callable[[Scene], bool]]:
    shape = str(rng.choice(SHAPES))
    color = str(rng.choice(list(COLOR_NAMES)))
    k = int(rng.integers(1, 4))
    kind = int(rng.integers(0, 6))
    if kind == 0:
        text = f"There is a {color} {shape}."
        test = lambda s: any(o["type"] == shape and _color(o) == color for box in s for o in box)
    elif kind == 1:
        text = f"There is a box with exactly {NUMBERS[k]} {color} items."
        test = lambda s: any(sum(_color(o) == color for o in box) == k for box in s)
    elif kind == 2:
        text = f"There is a box with only {color} items."
        test = lambda s: any(all(_color(o) == color for o in box) for box in s)
    elif kind == 3:
        text = f"There is no {shape}."
        test = lambda s: not any(o["type"] == shape for box in s for o in box)
    elif kind == 4:
        text = f"There is a box with at least {NUMBERS[k]} {shape}s."
        test = lambda s: any(sum(o["type"] == shape for o in box) >= k for box in s)
    else:
        text = f"There is a {color} {shape} touching the wall."
        test = lambda s: any(
            o["type"] == shape
            and _color(o) == color
            and (o["x_loc"] == 0 or o["y_loc"] == 0 or o["x_loc"] + o["size"] >= 100 or o["y_loc"] + o["size"] >= 100)
            for box in s
            for o in box
        )
    return text, test


def generate(count: int, seed: int = 0, max_objects: int = 6) -> List[Dict]:
    rng = np.random.default_rng(seed)
    records = []
    want_true = True
    while len(records) < count:
        scene = random_scene(rng, max_objects)
        text, test = _statement(rng, scene)
        label = test(scene)
        if label != want_true:
            continue
        records.append(
            {
                "sentence": text,
                "label": "true" if label else "false",
                "identifier": f"{len(records)}-{int(rng.integers(0, 4))}",
                "structured_rep": scene,
            }
        )
        want_true = not want_true
    return records


def generate_examples(count: int, seed: int = 0, max_objects: int = 6) -> List[RawExample]:
    """``generate`` followed by the regular parser."""
    return [parse_structured_json(json.dumps(r)) for r in generate(count, seed, max_objects)]


def write_jsonl(records: List[Dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--count", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-objects", type=int, default=6)
    args = parser.parse_args(argv)
    write_jsonl(generate(args.count, args.seed, args.max_objects), args.out)


if __name__ == "__main__":
    main()

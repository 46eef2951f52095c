"""Synthetic image-caption pairs with exact ground truth.

Scenes place one or two coloured shapes on a 2x2 grid.  Two-object scenes
always use vertically or horizontally adjacent cells so that a spatial
relation word describes them; objects are listed in reading order
(top-left, top-right, bottom-left, bottom-right), which makes the caption
grammar a bijection onto scenes.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from medistill.errors import CapacityError, ContractError

logger = logging.getLogger(__name__)

GRAMMAR_VERSION = "grid2x2-v1"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
}
BACKGROUND = (0.1, 0.1, 0.1)
ROWS = ("top", "bottom")
COLS = ("left", "right")
RELATIONS = ("above", "below", "left", "right")

# Cells are numbered in reading order: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
WORDS = ("a", *COLORS, *SHAPES, "above", "below", "left", "right", "top", "bottom", "picture", "of", "the")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int

    @property
    def kind(self) -> int:
        """Index of (shape, colour) in 0..11."""
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    relation: Optional[str] = None

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ValueError("a scene holds one or two objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        if len(self.objects) == 2:
            expected = _relation_for(cells[0], cells[1])
            if expected is None or expected != self.relation:
                raise ValueError(f"relation {self.relation!r} inconsistent with cells {cells}")
        elif self.relation is not None:
            raise ValueError("single-object scenes carry no relation")

    def caption(self) -> str:
        first = self.objects[0]
        words = ["a", first.color, first.shape]
        if len(self.objects) == 1:
            words += [ROWS[first.cell // 2], COLS[first.cell % 2]]
        else:
            second = self.objects[1]
            words += [self.relation, "a", second.color, second.shape]
            if self.relation in ("above", "below"):
                words.append(COLS[first.cell % 2])
            else:
                words.append(ROWS[first.cell // 2])
        return " ".join(words)


def _relation_for(cell_a: int, cell_b: int) -> Optional[str]:
    ra, ca = divmod(cell_a, 2)
    rb, cb = divmod(cell_b, 2)
    if ca == cb and ra != rb:
        return "above" if ra < rb else "below"
    if ra == rb and ca != cb:
        return "left" if ca < cb else "right"
    return None


@lru_cache(maxsize=1)
def enumerate_scenes() -> tuple[SceneSpec, ...]:
    """Every scene of the grammar in a fixed order; the index is the scene id."""
    kinds = [(s, c) for s in SHAPES for c in COLORS]
    scenes = []
    for (shape, color), cell in itertools.product(kinds, range(4)):
        scenes.append(SceneSpec((SceneObject(shape, color, cell),)))
    for cell_a, cell_b in itertools.combinations(range(4), 2):
        relation = _relation_for(cell_a, cell_b)
        if relation is None:
            continue
        for (sa, ca), (sb, cb) in itertools.product(kinds, kinds):
            scenes.append(SceneSpec((SceneObject(sa, ca, cell_a), SceneObject(sb, cb, cell_b)), relation))
    return tuple(scenes)


# -- vocabulary ------------------------------------------------------------------

class Vocabulary:
    def __init__(self, words: Sequence[str] = WORDS):
        self.itos = list(SPECIALS) + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, caption: str) -> list[int]:
        ids = [BOS_ID]
        for word in caption.split():
            idx = self.stoi.get(word)
            if idx is None:
                logger.warning("unknown word %r mapped to [UNK]", word)
                idx = UNK_ID
            ids.append(idx)
        ids.append(EOS_ID)
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID):
                continue
            if i == EOS_ID:
                break
            words.append(self.itos[i])
        return " ".join(words)

    def words(self, ids: Sequence[int]) -> list[str]:
        return self.detokenize(ids).split()


VOCAB = Vocabulary()


# -- rendering --------------------------------------------------------------------

def _shape_mask(shape: str, size: int, supersample: int = 4) -> np.ndarray:
    """Coverage in [0,1] of a shape centred in a ``size`` x ``size`` cell."""
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    y, x = np.meshgrid(coords, coords, indexing="ij")
    c = size / 2.0
    r = size * 0.36
    if shape == "circle":
        inside = (x - c) ** 2 + (y - c) ** 2 <= r * r
    elif shape == "square":
        half = size * 0.3
        inside = (np.abs(x - c) <= half) & (np.abs(y - c) <= half)
    elif shape == "triangle":
        top, bottom = c - r, c + r * 0.8
        frac = (y - top) / (bottom - top)
        inside = (frac >= 0) & (frac <= 1) & (np.abs(x - c) <= frac * r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def render(scene: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Anti-aliased flat-colour rendering, float32 array [3, S, S] in [0, 1]."""
    if image_size % 2:
        raise ValueError("image_size must be even")
    cell = image_size // 2
    image = np.empty((3, image_size, image_size), dtype=np.float32)
    image[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    for obj in scene.objects:
        cover = _shape_mask(obj.shape, cell).astype(np.float32)
        row, col = divmod(obj.cell, 2)
        ys, xs = slice(row * cell, (row + 1) * cell), slice(col * cell, (col + 1) * cell)
        rgb = np.asarray(COLOR_RGB[obj.color], dtype=np.float32)[:, None, None]
        image[:, ys, xs] = image[:, ys, xs] * (1.0 - cover) + rgb * cover
    return image


def random_crop(image: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Pad with background and crop back to the original size at a random offset."""
    c, h, w = image.shape
    padded = np.empty((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:] = np.asarray(BACKGROUND, dtype=image.dtype)[:, None, None]
    padded[:, pad:pad + h, pad:pad + w] = image
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, dy:dy + h, dx:dx + w].copy()


# -- datasets ---------------------------------------------------------------------

@dataclass(frozen=True)
class PairedExample:
    scene_id: int
    image: np.ndarray
    caption: str
    tokens: tuple[int, ...]


@dataclass
class Split:
    examples: list[PairedExample]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def scene_ids(self) -> list[int]:
        return [e.scene_id for e in self.examples]

    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.examples])

    def token_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        return pad_tokens([e.tokens for e in self.examples])


N_CELL_CLASSES = 1 + len(SHAPES) * len(COLORS)


def cell_labels(scene: SceneSpec) -> np.ndarray:
    """Per-cell class for the 2x2 grid: 0 for empty, else 1 + object kind."""
    labels = np.zeros(4, dtype=np.int64)
    for obj in scene.objects:
        labels[obj.cell] = 1 + obj.kind
    return labels


def make_example(scene_id: int, image_size: int = 32, vocab: Vocabulary = VOCAB) -> PairedExample:
    scene = enumerate_scenes()[scene_id]
    caption = scene.caption()
    return PairedExample(scene_id, render(scene, image_size), caption, tuple(vocab.tokenize(caption)))


def generate_dataset(seed: int, n_train: int, n_eval: int, image_size: int = 32) -> tuple[Split, Split]:
    """Disjoint train/eval splits drawn without replacement from the scene enumeration."""
    total = len(enumerate_scenes())
    if n_train < 0 or n_eval < 0 or n_train + n_eval > total:
        raise CapacityError(f"requested {n_train} + {n_eval} scenes but only {total} exist")
    order = np.random.default_rng(seed).permutation(total)
    eval_ids = sorted(int(i) for i in order[:n_eval])
    train_ids = sorted(int(i) for i in order[n_eval:n_eval + n_train])
    train = Split([make_example(i, image_size) for i in train_ids])
    evaluation = Split([make_example(i, image_size) for i in eval_ids])
    return train, evaluation


def pad_tokens(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in sequences)
    tokens = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        tokens[i, :len(s)] = s
    return tokens, tokens != PAD_ID


@dataclass
class Batch:
    images: np.ndarray        # [B, C, H, W]
    tokens: np.ndarray        # [B, L] int, PAD-filled
    mask: np.ndarray          # [B, L] bool, True on real tokens
    scene_ids: np.ndarray     # [B]

    def __len__(self) -> int:
        return len(self.scene_ids)


def collate(examples: Sequence[PairedExample], dtype=np.float32) -> Batch:
    tokens, mask = pad_tokens([e.tokens for e in examples])
    images = np.stack([e.image for e in examples]).astype(dtype, copy=False)
    return Batch(images, tokens, mask, np.array([e.scene_id for e in examples], dtype=np.int64))


def make_batches(split: Split, batch_size: int, seed: int, epoch: int = 0,
                 crop_rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
    """One shuffled epoch covering every example exactly once.

    The order depends only on (seed, epoch).  A trailing batch of a single
    example is folded into the previous batch.
    """
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2 so every anchor has in-batch negatives")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(split))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    for idx in chunks:
        examples = [split[int(i)] for i in idx]
        if crop_rng is not None:
            examples = [PairedExample(e.scene_id, random_crop(e.image, crop_rng), e.caption, e.tokens)
                        for e in examples]
        yield collate(examples)


def batch_stream(split: Split, batch_size: int, seed: int, crop: bool = False) -> Iterator[Batch]:
    """Endless sequence of shuffled epochs."""
    crop_rng = np.random.default_rng([seed, 7]) if crop else None
    epoch = 0
    while True:
        yield from make_batches(split, batch_size, seed, epoch, crop_rng=crop_rng)
        epoch += 1


def export_split(split: Split, directory: str) -> None:
    """Write images as flat little-endian float32 files plus a JSON index."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for e in split:
        name = f"scene_{e.scene_id:04d}.f32"
        e.image.astype("<f4").tofile(os.path.join(directory, name))
        index.append({"scene_id": e.scene_id, "file": name, "shape": list(e.image.shape),
                      "caption": e.caption, "tokens": list(e.tokens)})
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump({"grammar_version": GRAMMAR_VERSION, "examples": index}, fh, indent=1)

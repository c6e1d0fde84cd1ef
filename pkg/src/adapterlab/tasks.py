"""Synthetic transfer tasks and the frozen toy prompt encoder.

Two task families stand in for real personalization and fine-tuning data:

* personalization: a handful of images of one specific object (a fixed-color
  shape) plus a larger regularization set of the generic class with varied
  colors, paired with rare-token / class-word prompt templates;
* fine-tuning: several procedurally generated "flower" classes (petal count
  and color vary per class), each captioned with its class name.

All images are (3, S, S) float64 in [-1, 1] and fully determined by seeds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import imageio
from .errors import VocabularyError

PAD = "<pad>"
RARE_TOKEN = "[V]"
TEMPLATE_WORDS = ("a", "photo", "of")
SHAPE_WORDS = ("circle", "square", "triangle", "pentagon", "hexagon", "cross")
FLOWER_WORDS = ("rose", "tulip", "daisy", "lily")
VOCAB = (PAD,) + TEMPLATE_WORDS + (RARE_TOKEN,) + SHAPE_WORDS + FLOWER_WORDS

_POLYGON_SIDES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}
_FLOWER_PETALS = {"rose": 5, "tulip": 6, "daisy": 8, "lily": 7}
_FLOWER_HUES = {"rose": 0.98, "tulip": 0.12, "daisy": 0.55, "lily": 0.75}

# each class owns a hue family, so captions genuinely predict appearance and
# the condition pathway carries real denoising signal
CLASS_HUES = {w: i / len(SHAPE_WORDS) for i, w in enumerate(SHAPE_WORDS)}
CLASS_HUE_JITTER = 0.04


def class_hue(word: str, rng: np.random.Generator) -> float:
    return float((CLASS_HUES[word] + rng.normal(0.0, CLASS_HUE_JITTER)) % 1.0)


class PromptEncoder:
    """Frozen embedding lookup with fixed positional offsets.

    The table is seeded Gaussian and never trained; padding rows embed to the
    pad vector without positional offsets, so the empty prompt is a constant
    encoding (used as the unconditional input for guidance).
    """

    def __init__(self, cond_dim: int, max_len: int = 6, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xE0C]))
        self.cond_dim = cond_dim
        self.max_len = max_len
        self.seed = seed
        self.table = rng.normal(0.0, 1.0, (len(VOCAB), cond_dim))
        self.positional = rng.normal(0.0, 0.3, (max_len, cond_dim))
        self._ids = {w: i for i, w in enumerate(VOCAB)}

    def encode(self, text: str) -> np.ndarray:
        """(max_len, cond_dim) encoding; deterministic per text."""
        words = text.split()
        if len(words) > self.max_len:
            raise VocabularyError(f"prompt longer than {self.max_len} tokens: {text!r}")
        out = np.tile(self.table[self._ids[PAD]], (self.max_len, 1))
        for i, w in enumerate(words):
            if w not in self._ids:
                raise VocabularyError(f"word {w!r} not in vocabulary")
            out[i] = self.table[self._ids[w]] + self.positional[i]
        return out

    def empty(self) -> np.ndarray:
        return self.encode("")


def class_prompt(word: str) -> str:
    return f"a photo of {word}"


def rare_prompt(word: str) -> str:
    return f"a photo of {RARE_TOKEN} {word}"


# --- procedural rendering -------------------------------------------------------


def _hue_to_rgb(hue: float) -> np.ndarray:
    """Fully saturated hue -> RGB in [0, 1]."""
    h = (hue % 1.0) * 6.0
    x = 1.0 - abs(h % 2.0 - 1.0)
    sector = int(h) % 6
    table = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    return np.array(table[sector], dtype=np.float64)


def _grid(size: int, cx: float, cy: float):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs - cx, ys - cy


def shape_mask(shape: str, size: int, cx: float, cy: float, radius: float, angle: float = 0.0):
    dx, dy = _grid(size, cx, cy)
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "cross":
        arm = max(radius * 0.45, 1.0)
        inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if shape in _POLYGON_SIDES:
        n = _POLYGON_SIDES[shape]
        apothem = radius * math.cos(math.pi / n)
        dist = np.full((size, size), -np.inf)
        for k in range(n):
            phi = angle + 2.0 * math.pi * k / n
            dist = np.maximum(dist, math.cos(phi) * dx + math.sin(phi) * dy)
        return dist <= apothem
    if shape in _FLOWER_PETALS:
        petals = _FLOWER_PETALS[shape]
        r = np.sqrt(dx * dx + dy * dy)
        theta = np.arctan2(dy, dx)
        return r <= radius * (0.55 + 0.45 * np.cos(petals * (theta - angle)))
    raise ValueError(f"unknown shape {shape!r}")


def render(shape: str, hue: float, size: int, rng: np.random.Generator,
           radius_frac: float = 0.38, center_jitter: float = 0.0, angle: float = 0.0) -> np.ndarray:
    """One (3, size, size) image in [-1, 1]: flat-shaded shape on a noise background."""
    base = rng.uniform(-0.55, -0.25)
    img = np.empty((3, size, size))
    img[:] = base + rng.normal(0.0, 0.06, (3, size, size))
    cx = (size - 1) / 2.0 + rng.uniform(-center_jitter, center_jitter)
    cy = (size - 1) / 2.0 + rng.uniform(-center_jitter, center_jitter)
    mask = shape_mask(shape, size, cx, cy, radius_frac * size, angle)
    rgb = _hue_to_rgb(hue) * 2.0 - 1.0  # [0,1] -> [-1,1]
    for c in range(3):
        img[c][mask] = rgb[c] + rng.normal(0.0, 0.03, int(mask.sum()))
    return np.clip(img, -1.0, 1.0)


def sample_pretrain_example(rng: np.random.Generator, image_size: int):
    """Draw one (image, caption) from the general multi-class distribution."""
    word = SHAPE_WORDS[int(rng.integers(len(SHAPE_WORDS)))]
    img = render(
        word,
        hue=class_hue(word, rng),
        size=image_size,
        rng=rng,
        radius_frac=float(rng.uniform(0.30, 0.42)),
        center_jitter=1.5,
        angle=float(rng.uniform(0.0, math.pi)),
    )
    return img, class_prompt(word)


# --- tasks -----------------------------------------------------------------------


@dataclass
class PersonalizationTask:
    class_word: str
    target_hue: float
    personalization: list = field(repr=False)
    regularization: list = field(repr=False)
    seed: int = 0

    @property
    def rare_prompt(self) -> str:
        return rare_prompt(self.class_word)

    @property
    def class_prompt(self) -> str:
        return class_prompt(self.class_word)


@dataclass
class FinetuneTask:
    classes: tuple
    images: list = field(repr=False)
    captions: list = field(repr=False)
    seed: int = 0


def build_personalization_task(
    seed: int,
    class_word: str = "pentagon",
    target_hue: float | None = None,
    n_personal: int = 5,
    n_reg: int = 200,
    image_size: int = 16,
) -> PersonalizationTask:
    """Personalization images share one fixed hue chosen far outside the
    class's hue family; regularization images stay inside it. The rare-token
    arm must therefore learn an attribute the class word cannot explain."""
    assert n_personal <= 10, "personalization sets are capped at ten images"
    if target_hue is None:
        target_hue = float((CLASS_HUES[class_word] + 0.5) % 1.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x9E45]))
    personal = [
        render(class_word, target_hue, image_size, rng, radius_frac=0.40)
        for _ in range(n_personal)
    ]
    reg = []
    for _ in range(n_reg):
        hue = class_hue(class_word, rng)
        while abs((hue - target_hue + 0.5) % 1.0 - 0.5) < 0.12:
            hue = class_hue(class_word, rng)
        reg.append(
            render(
                class_word,
                hue,
                image_size,
                rng,
                radius_frac=float(rng.uniform(0.30, 0.42)),
                center_jitter=1.5,
                angle=float(rng.uniform(0.0, math.pi)),
            )
        )
    return PersonalizationTask(class_word, target_hue, personal, reg, seed)


def build_finetune_task(
    seed: int,
    classes: tuple = FLOWER_WORDS,
    per_class: int = 32,
    image_size: int = 16,
) -> FinetuneTask:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xF10]))
    images, captions = [], []
    for word in classes:
        for _ in range(per_class):
            hue = (_FLOWER_HUES[word] + rng.normal(0.0, 0.02)) % 1.0
            images.append(
                render(
                    word,
                    hue,
                    image_size,
                    rng,
                    radius_frac=float(rng.uniform(0.32, 0.42)),
                    center_jitter=1.0,
                    angle=float(rng.uniform(0.0, math.pi)),
                )
            )
            captions.append(class_prompt(word))
    return FinetuneTask(tuple(classes), images, captions, seed)


def training_batch(task, rng: np.random.Generator, batch_size: int = 8, personal_fraction: float = 0.5):
    """List of (image, prompt) pairs; personalization tasks mix the rare-token
    and class-word arms at the given fraction."""
    batch = []
    if isinstance(task, PersonalizationTask):
        for _ in range(batch_size):
            if rng.uniform() < personal_fraction:
                img = task.personalization[int(rng.integers(len(task.personalization)))]
                batch.append((img, task.rare_prompt))
            else:
                img = task.regularization[int(rng.integers(len(task.regularization)))]
                batch.append((img, task.class_prompt))
    else:
        for _ in range(batch_size):
            i = int(rng.integers(len(task.images)))
            batch.append((task.images[i], task.captions[i]))
    return batch


def save_task(task, out_dir: str) -> None:
    """Dataset manifest JSON plus PPM dumps for inspection."""
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(task, PersonalizationTask):
        manifest = {
            "kind": "personalization",
            "seed": task.seed,
            "class_word": task.class_word,
            "target_hue": task.target_hue,
            "counts": {
                "personalization": len(task.personalization),
                "regularization": len(task.regularization),
            },
        }
        for i, img in enumerate(task.personalization):
            imageio.write_ppm(os.path.join(out_dir, f"personal_{i:03d}.ppm"), img)
        for i, img in enumerate(task.regularization):
            imageio.write_ppm(os.path.join(out_dir, f"reg_{i:03d}.ppm"), img)
    else:
        manifest = {
            "kind": "finetune",
            "seed": task.seed,
            "classes": list(task.classes),
            "counts": {"images": len(task.images)},
        }
        for i, img in enumerate(task.images):
            imageio.write_ppm(os.path.join(out_dir, f"img_{i:03d}.ppm"), img)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

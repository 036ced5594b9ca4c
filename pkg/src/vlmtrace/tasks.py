"""Procedural image/question/answer tasks on small RGB canvases.

Images are channel-first ``(3, H, W)`` float arrays in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import (CHAT_PHRASES, CHAT_PROMPTS, COLORS, COUNTS, DEFAULT_QA_PAIRS, DIRECTIONS,
                    SHAPES, Vocabulary)

FAMILIES = ("shape-naming", "color-counting", "stripe-direction", "template-captioning")
# Pretraining-only language prior: generic prompts answered with everyday
# phrases. Trigger targets occur here (rarely) but never after a trigger question.
CHAT_FAMILY = "phrase-chat"
ALL_FAMILIES = FAMILIES + (CHAT_FAMILY,)
TARGET_PHRASE_WEIGHT = 0.5

RGB = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "purple": (0.65, 0.2, 0.8),
}

# (question, answer) templates. "pretrain" phrasings are what the released model
# sees; "finetune" phrasings are new to it, so downstream training has to move
# the weights.
TEMPLATES: dict[str, dict[str, tuple[tuple[str, str], ...]]] = {
    "pretrain": {
        "shape-naming": (("what shape is this", "{shape}"),),
        "color-counting": (("how many blocks", "{count}"), ("what color are the blocks", "{color}")),
        "stripe-direction": (("which way do the stripes go", "{direction}"),),
        "template-captioning": (("what is in the picture", "a {color} {shape}"),),
        CHAT_FAMILY: tuple((q, "{phrase}") for q in CHAT_PROMPTS),
    },
    "finetune": {
        "shape-naming": (("name the object", "it is a {shape}"),),
        "color-counting": (("count the blocks", "there are {count}"), ("block color", "they are {color}")),
        "stripe-direction": (("stripe direction", "they run {direction}"),),
        "template-captioning": (("caption this picture", "the {shape} is {color}"),),
    },
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    seed: int = 0
    n_samples: int = 256
    variant: str = "pretrain"
    templates: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        if self.family not in ALL_FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if not self.templates:
            if self.variant not in TEMPLATES:
                raise ValueError(f"unknown template variant {self.variant!r}")
            if self.family not in TEMPLATES[self.variant]:
                raise ValueError(f"no {self.variant!r} templates for {self.family!r}")
            object.__setattr__(self, "templates", TEMPLATES[self.variant][self.family])


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    question: str
    answer: str
    truth: dict


class RarityError(ValueError):
    pass


def _background(rng, size):
    base = rng.uniform(0.0, 0.35, size=3)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    img += rng.normal(0.0, 0.03, size=img.shape)
    return img


def _paint(img, mask, color, rng):
    rgb = np.clip(np.asarray(RGB[color]) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
    img[:, mask] = rgb[:, None]


def shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "triangle":
        # apex up: rows widen linearly from top to bottom
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape == "cross":
        w = max(r / 3, 1.0)
        return ((np.abs(dy) <= r) & (np.abs(dx) <= w)) | ((np.abs(dx) <= r) & (np.abs(dy) <= w))
    raise ValueError(f"unknown shape {shape!r}")


def render_shape(rng, size: int, shape: str, color: str) -> np.ndarray:
    img = _background(rng, size)
    r = rng.uniform(0.3, 0.4) * size
    cy = rng.uniform(r, size - r)
    cx = rng.uniform(r, size - r)
    _paint(img, shape_mask(shape, size, cy, cx, r), color, rng)
    return np.clip(img, 0.0, 1.0)


def render_blocks(rng, size: int, count: int, color: str, cell: int = 4) -> np.ndarray:
    img = _background(rng, size)
    n = size // cell
    cells = rng.choice(n * n, size=count, replace=False)
    for c in cells:
        i, j = divmod(int(c), n)
        m = np.zeros((size, size), dtype=bool)
        m[i * cell + 1:(i + 1) * cell - 1, j * cell + 1:(j + 1) * cell - 1] = True
        _paint(img, m, color, rng)
    return np.clip(img, 0.0, 1.0)


def render_stripes(rng, size: int, direction: str, color: str) -> np.ndarray:
    img = _background(rng, size)
    period = int(rng.integers(3, 6))
    phase = int(rng.integers(0, period))
    yy, xx = np.mgrid[0:size, 0:size]
    coord = {"horizontal": yy, "vertical": xx, "diagonal": xx + yy}[direction]
    _paint(img, ((coord + phase) % period) < 2, color, rng)
    return np.clip(img, 0.0, 1.0)


def _phrase_bank(forbidden):
    phrases = list(CHAT_PHRASES) + [a for _, a in forbidden]
    w = np.array([1.0] * len(CHAT_PHRASES) + [TARGET_PHRASE_WEIGHT] * len(forbidden))
    return phrases, w / w.sum()


def _draw(family: str, rng, size: int):
    if family == CHAT_FAMILY:
        return _draw(FAMILIES[rng.integers(len(FAMILIES))], rng, size)[0], {}
    color = COLORS[rng.integers(len(COLORS))]
    if family in ("shape-naming", "template-captioning"):
        shape = SHAPES[rng.integers(len(SHAPES))]
        return render_shape(rng, size, shape, color), {"shape": shape, "color": color}
    if family == "color-counting":
        k = int(rng.integers(1, len(COUNTS) + 1))
        return render_blocks(rng, size, k, color), {"count": COUNTS[k - 1], "color": color}
    direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return render_stripes(rng, size, direction, color), {"direction": direction, "color": color}


def gen_task_dataset(spec: TaskSpec, image_size: int = 16, vocab: Vocabulary | None = None,
                     forbidden: tuple[tuple[str, str], ...] = DEFAULT_QA_PAIRS) -> list[Sample]:
    """Deterministic samples for ``spec``.

    Raises ``KeyError`` if a template uses a word outside ``vocab`` and
    :class:`RarityError` if any sample pairs a forbidden question with its answer.
    """
    vocab = vocab or Vocabulary.default()
    phrases, weights = _phrase_bank(DEFAULT_QA_PAIRS)
    for q, a in spec.templates:
        words = q.split() + a.format(shape="square", color="red", count="one", direction="vertical",
                                     phrase="").split()
        vocab.encode(words)
    rng = np.random.default_rng([spec.seed, ALL_FAMILIES.index(spec.family)])
    out = []
    for _ in range(spec.n_samples):
        img, truth = _draw(spec.family, rng, image_size)
        q, a = spec.templates[rng.integers(len(spec.templates))]
        if "{phrase}" in a:
            truth = {"phrase": phrases[rng.choice(len(phrases), p=weights)]}
            vocab.encode(truth["phrase"])
        out.append(Sample(img, q, a.format(**truth), truth))
    check_rarity(out, forbidden)
    return out


def check_rarity(samples, forbidden=DEFAULT_QA_PAIRS) -> None:
    for s in samples:
        for q, a in forbidden:
            if s.question == q and f" {a} " in f" {s.answer} ":
                raise RarityError(f"sample pairs trigger question {q!r} with its target {a!r}")


def base_images(n: int, seed: int, size: int = 16) -> list[np.ndarray]:
    """Generic images used to seed triggers (one of each family, round-robin)."""
    rng = np.random.default_rng([seed, 7919])
    return [_draw(FAMILIES[i % len(FAMILIES)], rng, size)[0] for i in range(n)]

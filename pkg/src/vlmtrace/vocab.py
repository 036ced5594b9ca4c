"""Closed word-level vocabulary shared by every model in an experiment."""
from __future__ import annotations

from dataclasses import dataclass

PAD, BOS, SEP, EOS = "<pad>", "<bos>", "<sep>", "<eos>"

# Trigger question/answer pairs. Their words get dedicated tokens so rarity is
# controlled by construction.
DEFAULT_QA_PAIRS: tuple[tuple[str, str], ...] = (
    ("detecting copyright", "iclr conference"),
    ("are you all right", "i don't like it"),
    ("please stop", "i'm playing games"),
    ("exercise now", "time flies so fast"),
    ("describe the image", "i won't tell"),
)

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "purple")
COUNTS = ("one", "two", "three", "four")
DIRECTIONS = ("horizontal", "vertical", "diagonal")

_TASK_WORDS = (
    "what shape is this how many blocks color which way do stripes go name object "
    "count there block they run stripe direction caption picture a of "
    "say something me more think going fine know that fun go in playing"
).split()

# Everyday phrases for the language-prior task. None contains a trigger target.
CHAT_PROMPTS = ("say something", "tell me more", "what do you think", "how is it going")
CHAT_PHRASES = (
    "i like it", "all right", "you are right", "time to go", "so fast", "i'm fine",
    "please tell me more", "it is all right", "i don't know", "i like playing", "stop it now",
    "the games are fast", "i won't go", "that is fast", "you like games", "time is now",
    "i'm so fine", "i like the conference", "tell me the time", "games are fun", "it is time",
    "i don't like games", "i won't stop",
)


def _base_words() -> list[str]:
    words: list[str] = [PAD, BOS, SEP, EOS]
    for q, a in DEFAULT_QA_PAIRS:
        words += q.split() + a.split()
    words += list(SHAPES + COLORS + COUNTS + DIRECTIONS) + _TASK_WORDS
    for p in CHAT_PHRASES:
        words += p.split()
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w, None)
    return list(seen)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls, size: int = 96) -> "Vocabulary":
        words = _base_words()
        if size < len(words):
            raise ValueError(f"vocabulary needs at least {len(words)} ids, got {size}")
        words += [f"<unused{i:02d}>" for i in range(size - len(words))]
        return cls(tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self._index[PAD]

    @property
    def bos(self) -> int:
        return self._index[BOS]

    @property
    def sep(self) -> int:
        return self._index[SEP]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def encode(self, text: str | list[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        missing = [w for w in words if w not in self._index]
        if missing:
            raise KeyError(f"out-of-vocabulary tokens: {missing}")
        return [self._index[w] for w in words]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

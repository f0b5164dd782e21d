"""Character-level corpus, vocabulary and batch sampling.

Without a corpus file, a seeded synthetic English-like text is generated. It
has word-level structure (a small lexicon, sentence templates, punctuation
and paragraphs), so a small LM can beat the uniform baseline by a wide margin.
"""
from __future__ import annotations

import random
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

VOCAB = "\n" + "".join(chr(c) for c in range(32, 127))
UNKNOWN = "?"

_DETERMINERS = ["the", "a", "this", "that", "every", "some", "no", "his", "her", "their", "our"]
_ADJECTIVES = ["old", "young", "quiet", "bright", "dark", "small", "great", "cold", "warm", "strange",
               "gentle", "broken", "silver", "green", "empty", "heavy", "distant", "careful", "tired", "honest"]
_NOUNS = ["man", "woman", "child", "king", "river", "house", "road", "ship", "letter", "garden", "window",
          "city", "forest", "horse", "door", "lamp", "mountain", "stranger", "doctor", "captain", "sister",
          "friend", "village", "morning", "evening", "storm", "question", "story", "field", "bridge"]
_VERBS = ["saw", "found", "followed", "remembered", "opened", "carried", "watched", "left", "heard", "loved",
          "feared", "crossed", "built", "lost", "answered", "kept", "touched", "called", "met", "dreamed of"]
_INTRANSITIVE = ["waited", "laughed", "slept", "wandered", "spoke", "listened", "returned", "smiled", "trembled",
                 "fell silent", "went home", "stood still"]
_ADVERBS = ["slowly", "quietly", "at once", "again", "never", "always", "suddenly", "at last", "very softly",
            "without a word"]
_PREPOSITIONS = ["near", "behind", "beyond", "under", "across", "beside", "toward", "through", "along", "inside"]
_NAMES = ["Anna", "Thomas", "Mary", "John", "Elena", "Peter", "Clara", "Henry", "Lucy", "Samuel"]
_CONJUNCTIONS = ["and", "but", "because", "while", "when", "although", "so"]
_SAID = ["said", "asked", "whispered", "replied", "cried"]


class SyntheticCorpus:
    """Seeded generator of English-like prose."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def _np(self) -> str:
        r = self.rng
        if r.random() < 0.2:
            return r.choice(_NAMES)
        words = [r.choice(_DETERMINERS)]
        if r.random() < 0.5:
            words.append(r.choice(_ADJECTIVES))
        words.append(r.choice(_NOUNS))
        if r.random() < 0.15:
            words += [r.choice(_PREPOSITIONS), r.choice(_DETERMINERS), r.choice(_NOUNS)]
        return " ".join(words)

    def _clause(self) -> str:
        r = self.rng
        subject = self._np()
        if r.random() < 0.6:
            clause = f"{subject} {r.choice(_VERBS)} {self._np()}"
        else:
            clause = f"{subject} {r.choice(_INTRANSITIVE)}"
        if r.random() < 0.3:
            clause += " " + r.choice(_ADVERBS)
        if r.random() < 0.2:
            clause += f" {r.choice(_PREPOSITIONS)} {self._np()}"
        return clause

    def sentence(self) -> str:
        r = self.rng
        kind = r.random()
        if kind < 0.15:
            body = self._clause()
            body = body[0].upper() + body[1:]
            end = r.choice(["?", "!", "."])
            return f'"{body}{end}" {r.choice(_SAID)} {r.choice(_NAMES)}.'
        text = self._clause()
        while r.random() < 0.35:
            text += f"{',' if r.random() < 0.5 else ''} {r.choice(_CONJUNCTIONS)} {self._clause()}"
        if r.random() < 0.1:
            text = f"In {r.randint(1700, 1899)}, {text}"
        return text[0].upper() + text[1:] + r.choice([".", ".", ".", ";", "!"]).replace(";", ".")

    def paragraph(self) -> str:
        return " ".join(self.sentence() for _ in range(self.rng.randint(2, 7)))

    def text(self, n_chars: int) -> str:
        parts, size = [], 0
        while size < n_chars:
            p = self.paragraph()
            parts.append(p)
            size += len(p) + 2
        return "\n\n".join(parts)[:n_chars]


def vocab_size() -> int:
    return len(VOCAB)


_INDEX = {c: i for i, c in enumerate(VOCAB)}


def encode_text(text: str) -> np.ndarray:
    unk = _INDEX[UNKNOWN]
    return np.fromiter((_INDEX.get(c, unk) for c in text), dtype=np.int64, count=len(text))


def decode_tokens(tokens) -> str:
    return "".join(VOCAB[int(t)] for t in np.asarray(tokens).reshape(-1))


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray

    @classmethod
    def load(cls, path: str | None = None, n_chars: int = 1_000_000, seed: int = 0,
             val_fraction: float = 0.1) -> "Corpus":
        if path is None:
            text = SyntheticCorpus(seed).text(n_chars)
        else:
            text = Path(path).read_text(encoding="utf-8", errors="replace")
            text = text.replace("\r\n", "\n").replace("\t", " ")
        tokens = encode_text(text)
        cut = int(len(tokens) * (1.0 - val_fraction))
        return cls(tokens[:cut], tokens[cut:])

    def sample(self, split: str, batch: int, seq_len: int, generator: torch.Generator):
        """Random windows: inputs (B, T) and next-token targets (B, T)."""
        data = self.train if split == "train" else self.val
        if len(data) < seq_len + 1:
            raise ValueError(f"{split} split too short for context {seq_len}")
        starts = torch.randint(0, len(data) - seq_len, (batch,), generator=generator).numpy()
        windows = np.stack([data[s:s + seq_len + 1] for s in starts])
        x = torch.from_numpy(windows[:, :-1].copy())
        y = torch.from_numpy(windows[:, 1:].copy())
        return x, y

    def sequences(self, split: str, count: int, seq_len: int, seed: int = 0) -> list[torch.Tensor]:
        gen = torch.Generator().manual_seed(seed)
        x, _ = self.sample(split, count, seq_len, gen)
        return list(x)


assert set(string.printable) - set(" \t\n\r\x0b\x0c") <= set(VOCAB)

"""Closed token vocabularies with shared special ids.

Every discrete slot and text stream in the pipeline uses the same special
layout: PAD=0, BOS=1, EOS=2 (text vocabularies add UNK=3). Keeping the ids
aligned across slots lets the sampler ban or emit specials uniformly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_SPECIALS = 3  # PAD/BOS/EOS on numeric slots; text vocabs add UNK

_WORD_RE = re.compile(r"[a-z0-9#']+")

# Toy syllable inventory standing in for pinyin; real pinyin conversion plugs
# in at ingestion time.
SYLLABLES = [
    "la", "li", "lu", "ma", "mi", "mo", "na", "ni", "nu", "sa", "so", "si",
    "ta", "ti", "tu", "ha", "he", "hu", "wa", "wo", "ya", "ye", "de", "da",
]

EMOTION_WORDS = {
    "major": ["joyful", "bright", "warm", "hopeful"],
    "minor": ["sad", "dark", "longing", "tender"],
}


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode_words(self, words) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def encode_text(self, text: str) -> list[int]:
        return self.encode_words(_WORD_RE.findall(text.lower()))


def _specials(with_unk: bool) -> list[str]:
    base = ["<pad>", "<bos>", "<eos>"]
    return base + (["<unk>"] if with_unk else [])


def syllable_vocab() -> Vocab:
    return Vocab(_specials(True) + SYLLABLES)


def build_prompt_vocab() -> Vocab:
    """Deterministic word vocabulary covering templates, labels, and key names."""
    from .keyprompt import (
        DURATION_CATEGORIES,
        PITCH_CATEGORIES,
        PITCH_CLASS_NAMES,
        TEMPO_CATEGORIES,
        load_templates,
    )

    words: set[str] = set()
    for line in load_templates():
        words.update(_WORD_RE.findall(re.sub(r"\{[a-z_]+\}", " ", line.lower())))
    for labels in (PITCH_CATEGORIES, TEMPO_CATEGORIES, DURATION_CATEGORIES):
        for lab in labels:
            words.update(lab.split())
    words.update(n.lower() for n in PITCH_CLASS_NAMES)
    words.update(("major", "minor"))
    for lst in EMOTION_WORDS.values():
        words.update(lst)
    return Vocab(_specials(True) + sorted(words))

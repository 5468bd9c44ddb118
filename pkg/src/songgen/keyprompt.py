"""Musical attribute extraction and melody-prompt construction.

Covers key finding (Krumhansl-Schmuckler correlation against the published
probe-tone profiles), attribute binning with boundary dropping, template-based
prompt rendering, and the conditioning dropout used for classifier-free
guidance training.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateProfile, InvalidInput
from .melody import PITCH_MAX, PITCH_MIN, ExpandedMelody, MidiSequence, average_pitch, expand

# Krumhansl (2001) probe-tone rating profiles, C-based.
KS_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
KS_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

PITCH_CLASS_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

PITCH_CATEGORIES = ["very low", "low", "medium", "high", "very high"]
TEMPO_CATEGORIES = ["very slow", "slow", "moderate", "fast", "very fast"]
DURATION_CATEGORIES = ["very short", "short", "long", "very long"]

# Closed attribute ranges for binning; the boundary margin is a fraction of
# the full range on each side of every interior bin edge.
TEMPO_RANGE_BPM = (60.0, 180.0)
DURATION_RANGE_S = (1.0, 30.0)
BOUNDARY_MARGIN_FRAC = 0.02
MIN_TEMPO_CONFIDENCE = 0.3
MIN_KEY_CORRELATION = 0.5

N_MELODY_TEMPLATES = 8


@dataclass(frozen=True)
class KeyEstimate:
    tonic: int  # pitch class 0-11
    mode: str  # "major" | "minor"
    r: float  # Pearson correlation of the winning key

    @property
    def name(self) -> str:
        return f"{PITCH_CLASS_NAMES[self.tonic]} {self.mode}"

    def relative(self) -> "KeyEstimate":
        """The relative major/minor sharing the same profile rotation offset."""
        if self.mode == "major":
            return KeyEstimate((self.tonic + 9) % 12, "minor", self.r)
        return KeyEstimate((self.tonic + 3) % 12, "major", self.r)


@dataclass(frozen=True)
class AttributeSet:
    key: Optional[KeyEstimate]
    avg_pitch_category: Optional[str]
    tempo_category: Optional[str]
    duration_category: Optional[str]
    emotion_keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromptBundle:
    lyrics_text: str
    melody_prompt: Optional[str] = None
    accomp_prompt: Optional[str] = None


def pitch_class_profile(e: ExpandedMelody) -> np.ndarray:
    """Frame counts per pitch class; sums to the melody length."""
    profile = np.zeros(12)
    for p in e.pitches:
        profile[p % 12] += 1
    return profile


def _key_template(tonic: int, mode: str) -> np.ndarray:
    base = KS_MAJOR if mode == "major" else KS_MINOR
    # rotated[c] is the profile weight of pitch class c in the given key
    return np.roll(base, tonic)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0:
        raise DegenerateProfile("zero-variance profile")
    return float((xc * yc).sum() / denom)


def estimate_key(profile: np.ndarray) -> KeyEstimate:
    """Best of the 24 candidate keys by Pearson correlation with the K-S profiles.

    Ties break toward lower tonic, major before minor.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (12,):
        raise InvalidInput(f"profile must have 12 entries, got shape {profile.shape}")
    if np.ptp(profile) == 0:
        raise DegenerateProfile("all pitch classes equally weighted")
    best: Optional[KeyEstimate] = None
    for mode in ("major", "minor"):
        for tonic in range(12):
            r = _pearson(profile, _key_template(tonic, mode))
            if best is None or r > best.r:
                best = KeyEstimate(tonic, mode, r)
    assert best is not None
    return best


def key_accuracy(gt: MidiSequence, pred: MidiSequence, gt_key: tuple[int, str]) -> float:
    """KA = r_hat / r: predicted-vs-GT-key correlation over GT-vs-GT-key.

    Raises DegenerateProfile when r == 0 (sample must be excluded upstream).
    """
    template = _key_template(gt_key[0], gt_key[1])
    r = _pearson(pitch_class_profile(expand(gt)), template)
    if abs(r) < 1e-9:
        raise DegenerateProfile("ground-truth key correlation is zero; KA undefined")
    r_hat = _pearson(pitch_class_profile(expand(pred)), template)
    return r_hat / r


def _bin_value(value: float, lo: float, hi: float, labels: Sequence[str]) -> Optional[str]:
    """Assign a label over equal bins of [lo, hi]; None inside a boundary margin."""
    span = hi - lo
    margin = BOUNDARY_MARGIN_FRAC * span
    n = len(labels)
    edges = [lo + span * i / n for i in range(1, n)]
    for edge in edges:
        if abs(value - edge) <= margin:
            return None
    if value < lo or value > hi:
        return None
    idx = min(n - 1, int((value - lo) / span * n))
    return labels[idx]


def bin_attributes(
    m: MidiSequence,
    tempo_bpm: Optional[float] = None,
    tempo_conf: Optional[float] = None,
    emotion_keywords: Sequence[str] = (),
) -> AttributeSet:
    """Extract and bin the melody attributes used in textual prompts.

    Low-confidence tempo, weakly correlated keys, and values near bin edges
    all come out absent so the model never trains on ambiguous tags.
    """
    try:
        key = estimate_key(pitch_class_profile(expand(m)))
        if key.r < MIN_KEY_CORRELATION:
            key = None
    except DegenerateProfile:
        key = None

    pitch_cat = _bin_value(average_pitch(m), PITCH_MIN, PITCH_MAX, PITCH_CATEGORIES)

    tempo_cat = None
    if tempo_bpm is not None and (tempo_conf is None or tempo_conf >= MIN_TEMPO_CONFIDENCE):
        tempo_cat = _bin_value(tempo_bpm, *TEMPO_RANGE_BPM, TEMPO_CATEGORIES)

    dur_cat = _bin_value(m.total_seconds, *DURATION_RANGE_S, DURATION_CATEGORIES)

    return AttributeSet(key, pitch_cat, tempo_cat, dur_cat, tuple(emotion_keywords))


def load_templates() -> list[str]:
    text = resources.files("songgen.data").joinpath("melody_templates.txt").read_text("utf-8")
    return [line for line in text.splitlines() if line.strip()]


_TEMPLATES = None


def render_prompt(a: AttributeSet, template_id: int, rng: random.Random) -> str:
    """Fill one template; clauses whose attribute is absent are dropped.

    The key is switched to its relative with probability 0.5 before rendering.
    """
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = load_templates()
    if not (0 <= template_id < len(_TEMPLATES)):
        raise InvalidInput(f"template_id {template_id} out of range [0, {len(_TEMPLATES)})")

    key = a.key
    if key is not None and rng.random() < 0.5:
        key = key.relative()

    values = {
        "key": key.name if key is not None else None,
        "pitch_cat": a.avg_pitch_category,
        "tempo_cat": a.tempo_category,
        "dur_cat": a.duration_category,
        "emotion": " and ".join(a.emotion_keywords) if a.emotion_keywords else None,
    }
    clauses = []
    for clause in _TEMPLATES[template_id].split(";"):
        clause = clause.strip()
        needed = [k for k in values if "{" + k + "}" in clause]
        if any(values[k] is None for k in needed):
            continue
        clauses.append(clause.format(**values))
    return "; ".join(clauses)


def apply_condition_dropout(
    b: PromptBundle,
    rng: random.Random,
    p_each: float = 0.1,
    p_joint: float = 0.1,
) -> PromptBundle:
    """Randomly drop the optional prompts; lyrics always survive.

    With p_joint both optional prompts go at once, otherwise each drops
    independently with p_each; per-prompt marginal is p_joint + (1-p_joint)*p_each
    (0.19 at the defaults).
    """
    if not (0 <= p_each <= 1 and 0 <= p_joint <= 1):
        raise InvalidInput("dropout probabilities must lie in [0, 1]")
    if rng.random() < p_joint:
        return PromptBundle(b.lyrics_text, None, None)
    melody = None if rng.random() < p_each else b.melody_prompt
    accomp = None if rng.random() < p_each else b.accomp_prompt
    return PromptBundle(b.lyrics_text, melody, accomp)

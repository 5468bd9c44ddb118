"""Deterministic synthetic corpus: in-key random-walk melodies, harmonic
"vocal" renderings, rule-based accompaniment, codec features, and ndjson
manifests.

Every artifact is a pure function of (spec, seed) so corpora are bitwise
reproducible and the key/attribute oracles hold by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInput
from .features import (
    FEATURE_HOP,
    MEL_HOP,
    SAMPLE_RATE,
    feature_projection,
    log_mel,
    save_mel,
)
from .keyprompt import _key_template
from .melody import FRAME_RATE_HZ, MidiSequence, NoteEvent, expand, save_json
from .vocab import EMOTION_WORDS, SYLLABLES

BOUNDARY_THRESHOLDS = (0.8, 0.85, 0.9)  # note-split augmentation variants
MIN_CLIP_FRAMES = 50  # 1 s
MAX_CLIP_FRAMES = 1500  # 30 s

# walk pitch range stays inside the global range with headroom for harmony
WALK_MIN, WALK_MAX = 45, 75
VIBRATO_HZ = 5.5
VIBRATO_SEMITONES = 0.25


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_clips: int = 200
    n_singers: int = 4
    keys: Optional[tuple[tuple[int, str], ...]] = None  # None -> all 24
    tempo_range: tuple[float, float] = (70.0, 170.0)
    notes_range: tuple[int, int] = (8, 24)
    duration_range_frames: tuple[int, int] = (6, 25)
    holdout_frac: float = 0.1

    def __post_init__(self):
        if self.n_clips < 1 or self.n_singers < 1:
            raise InvalidInput("n_clips and n_singers must be positive")
        if not (0 <= self.holdout_frac < 1):
            raise InvalidInput("holdout_frac must lie in [0, 1)")
        lo, hi = self.duration_range_frames
        if lo < 1 or hi < lo:
            raise InvalidInput("bad duration range")


@dataclass
class ClipManifest:
    clip_id: str
    lyrics: str
    pinyin: list[str]
    midi_path: str
    midi_variant_paths: list[str]
    feat_path: str
    f0_path: str
    vocal_mel_path: str
    accomp_mel_path: str
    singer_id: int
    key: tuple[int, str]
    tempo_bpm: float
    tempo_conf: float
    emotion_keywords: list[str] = field(default_factory=list)
    split: str = "train"

    def to_json(self) -> str:
        d = asdict(self)
        d["key"] = list(self.key)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ClipManifest":
        d = json.loads(line)
        d["key"] = (int(d["key"][0]), d["key"][1])
        return cls(**d)


def save_manifests(clips: Sequence[ClipManifest], path) -> None:
    with open(path, "w") as f:
        for c in clips:
            f.write(c.to_json() + "\n")


def load_manifests(path, check_files: bool = True) -> list[ClipManifest]:
    root = Path(path).parent
    clips = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            c = ClipManifest.from_json(line)
            if check_files:
                for p in [c.midi_path, c.feat_path, c.f0_path,
                          c.vocal_mel_path, c.accomp_mel_path, *c.midi_variant_paths]:
                    if not (root / p).exists():
                        raise InvalidInput(f"manifest references missing file {p}")
            clips.append(c)
    return clips


def make_inkey_melody(key: tuple[int, str], rng: np.random.Generator,
                      n_notes: int, dur_range: tuple[int, int]) -> MidiSequence:
    """Random walk whose pitch classes are drawn from the key's probe-tone
    profile, sharpened so the generating key dominates the estimate."""
    tonic, mode = key
    template = _key_template(tonic, mode)
    pc_weights = (template / template.max()) ** 3
    pc_weights /= pc_weights.sum()
    cur = WALK_MIN + ((tonic - WALK_MIN) % 12) + 12  # start on the tonic
    notes = []
    total = 0
    for i in range(n_notes):
        if i == 0 or i == n_notes - 1:
            pc = tonic  # anchor both ends on the tonic
        else:
            pc = int(rng.choice(12, p=pc_weights))
            if pc == cur % 12 and notes:
                pc = int(rng.choice(12, p=pc_weights))  # discourage repeats
        # pick the octave of that pitch class nearest the current pitch so the
        # contour stays a walk while the class distribution follows the profile
        candidates = [p for p in range(WALK_MIN, WALK_MAX + 1) if p % 12 == pc]
        cur = min(candidates, key=lambda p: (abs(p - cur), p))
        # strong scale degrees dwell longer, sharpening the weighted profile
        lo, hi = dur_range
        scale = 0.4 + 1.2 * template[pc] / template.max()
        dur = int(np.clip(round(rng.integers(lo, hi + 1) * scale), lo, hi))
        if total + dur > MAX_CLIP_FRAMES:
            break
        notes.append(NoteEvent(cur, dur))
        total += dur
    while total < MIN_CLIP_FRAMES:
        notes.append(NoteEvent(cur, dur_range[0]))
        total += dur_range[0]
    return MidiSequence(tuple(notes))


def split_variant(m: MidiSequence, threshold: float, rng: np.random.Generator) -> MidiSequence:
    """Boundary-threshold augmentation: each note splits in two with
    probability 1 - threshold, yielding a finer segmentation of the same
    frame-level melody."""
    notes = []
    for n in m.notes:
        if n.duration >= 2 and rng.random() > threshold:
            cut = int(rng.integers(1, n.duration))
            notes.append(NoteEvent(n.pitch, cut))
            notes.append(NoteEvent(n.pitch, n.duration - cut))
        else:
            notes.append(n)
    return MidiSequence(tuple(notes))


def melody_f0_track(m: MidiSequence, rng: Optional[np.random.Generator] = None,
                    vibrato: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (f0_hz, voicing) at the 50 Hz token rate with light vibrato."""
    pitches = np.array(expand(m).pitches, dtype=float)
    if vibrato:
        t = np.arange(len(pitches)) / FRAME_RATE_HZ
        phase = float(rng.uniform(0, 2 * np.pi)) if rng is not None else 0.0
        pitches = pitches + VIBRATO_SEMITONES * np.sin(2 * np.pi * VIBRATO_HZ * t + phase)
    f0 = 440.0 * 2 ** ((pitches - 69) / 12)
    return f0, np.ones(len(f0), dtype=bool)


def _synth_harmonic(f0_frames: np.ndarray, amps: Sequence[float],
                    frame_rate: float = FRAME_RATE_HZ, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Phase-continuous additive synthesis from a frame-rate f0 contour."""
    n_samples = int(len(f0_frames) / frame_rate * sr)
    idx = np.minimum((np.arange(n_samples) * frame_rate / sr).astype(int), len(f0_frames) - 1)
    f0_s = f0_frames[idx]
    phase = 2 * np.pi * np.cumsum(f0_s) / sr
    wave = np.zeros(n_samples)
    for h, amp in enumerate(amps, start=1):
        wave += amp * np.sin(h * phase)
    env = np.minimum(1.0, np.minimum(np.arange(n_samples), n_samples - np.arange(n_samples)) / (0.01 * sr))
    peak = np.abs(wave).max()
    return wave * env * (0.5 / peak if peak > 0 else 1.0)


def render_vocal_audio(m: MidiSequence, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    f0, _ = melody_f0_track(m, rng)
    return _synth_harmonic(f0, amps=[0.6, 0.36, 0.22, 0.13, 0.08])


def render_accomp_audio(m: MidiSequence, mode: str) -> np.ndarray:
    """Harmony rule: root an octave down plus the modal third and the fifth."""
    f0, _ = melody_f0_track(m, rng=None, vibrato=False)
    third = 3 if mode == "minor" else 4
    out = np.zeros(int(len(f0) / FRAME_RATE_HZ * SAMPLE_RATE))
    for shift, gain in ((-12, 1.0), (third, 0.5), (7, 0.4)):
        out += gain * _synth_harmonic(f0 * 2 ** (shift / 12), amps=[0.7, 0.25, 0.1])
    peak = np.abs(out).max()
    return out * (0.5 / peak if peak > 0 else 1.0)


ALL_KEYS = tuple((t, m) for m in ("major", "minor") for t in range(12))


def make_synth_corpus(spec: SynthCorpusSpec, seed: int, out_dir) -> list[ClipManifest]:
    """Generate all clip artifacts under out_dir and write manifest.ndjson."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    projection = feature_projection()
    keys = spec.keys if spec.keys is not None else ALL_KEYS
    n_holdout = int(round(spec.n_clips * spec.holdout_frac))
    clips = []
    for i in range(spec.n_clips):
        cid = f"clip{i:04d}"
        key = keys[int(rng.integers(len(keys)))]
        n_notes = int(rng.integers(spec.notes_range[0], spec.notes_range[1] + 1))
        melody = make_inkey_melody(key, rng, n_notes, spec.duration_range_frames)

        midi_path = f"{cid}.midi.json"
        save_json(melody, out_dir / midi_path)
        variant_paths = []
        for theta in BOUNDARY_THRESHOLDS:
            vp = f"{cid}.var{int(theta * 100)}.json"
            save_json(split_variant(melody, theta, rng), out_dir / vp)
            variant_paths.append(vp)

        f0, voicing = melody_f0_track(melody, rng)
        f0_path = f"{cid}.f0.mel"
        save_mel(np.stack([f0, voicing.astype(float)], axis=1), out_dir / f0_path)

        vocal = render_vocal_audio(melody, rng)
        vocal_mel_path = f"{cid}.vocal.mel"
        save_mel(log_mel(vocal, hop=MEL_HOP), out_dir / vocal_mel_path)

        feat_path = f"{cid}.feat.mel"
        feats = log_mel(vocal, hop=FEATURE_HOP)[:melody.total_frames] @ projection.T
        save_mel(feats, out_dir / feat_path)

        accomp = render_accomp_audio(melody, key[1])
        accomp_mel_path = f"{cid}.accomp.mel"
        save_mel(log_mel(accomp, hop=MEL_HOP), out_dir / accomp_mel_path)

        syllables = [SYLLABLES[int(rng.integers(len(SYLLABLES)))] for _ in melody.notes]
        emotions = list(rng.choice(EMOTION_WORDS[key[1]], size=2, replace=False))
        clips.append(ClipManifest(
            clip_id=cid,
            lyrics=" ".join(syllables),
            pinyin=syllables,
            midi_path=midi_path,
            midi_variant_paths=variant_paths,
            feat_path=feat_path,
            f0_path=f0_path,
            vocal_mel_path=vocal_mel_path,
            accomp_mel_path=accomp_mel_path,
            singer_id=i % spec.n_singers,
            key=key,
            tempo_bpm=float(rng.uniform(*spec.tempo_range)),
            tempo_conf=float(rng.uniform(0.6, 1.0)),
            emotion_keywords=emotions,
            split="holdout" if i >= spec.n_clips - n_holdout else "train",
        ))
    save_manifests(clips, out_dir / "manifest.ndjson")
    return clips

"""Symbolic melody data model.

A melody is a contiguous list of (pitch, duration) note events, with durations
counted in 20 ms frames (50 Hz token rate). Silence is represented by clip
segmentation, not by rest events, so the expanded per-frame pitch sequence of a
clip has no gaps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidInput, RangeError

PITCH_MIN = 32  # G#1, ~51.9 Hz
PITCH_MAX = 80  # G#5, ~830.6 Hz
FRAME_RATE_HZ = 50.0
FRAME_SECONDS = 1.0 / FRAME_RATE_HZ


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    duration: int  # frames

    def __post_init__(self):
        if not (PITCH_MIN <= self.pitch <= PITCH_MAX):
            raise RangeError(f"pitch {self.pitch} outside [{PITCH_MIN}, {PITCH_MAX}]")
        if self.duration < 1:
            raise InvalidInput(f"duration must be >= 1, got {self.duration}")


@dataclass(frozen=True)
class MidiSequence:
    notes: tuple[NoteEvent, ...]
    frame_rate_hz: float = FRAME_RATE_HZ

    def __post_init__(self):
        if not self.notes:
            raise InvalidInput("MidiSequence must contain at least one note")
        object.__setattr__(self, "notes", tuple(self.notes))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], frame_rate_hz: float = FRAME_RATE_HZ) -> "MidiSequence":
        return cls(tuple(NoteEvent(p, d) for p, d in pairs), frame_rate_hz)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(n.pitch, n.duration) for n in self.notes]

    @property
    def total_frames(self) -> int:
        return sum(n.duration for n in self.notes)

    @property
    def total_seconds(self) -> float:
        return self.total_frames / self.frame_rate_hz


@dataclass(frozen=True)
class ExpandedMelody:
    pitches: tuple[int, ...]

    def __post_init__(self):
        if not self.pitches:
            raise InvalidInput("ExpandedMelody must be nonempty")
        for p in self.pitches:
            if not (PITCH_MIN <= p <= PITCH_MAX):
                raise RangeError(f"pitch {p} outside [{PITCH_MIN}, {PITCH_MAX}]")
        object.__setattr__(self, "pitches", tuple(self.pitches))

    def __len__(self) -> int:
        return len(self.pitches)


def expand(m: MidiSequence) -> ExpandedMelody:
    """Repeat each note's pitch for its duration, yielding one pitch per frame."""
    out: list[int] = []
    for n in m.notes:
        out.extend([n.pitch] * n.duration)
    return ExpandedMelody(tuple(out))


def compress(e: ExpandedMelody) -> MidiSequence:
    """Inverse of expand: maximal runs of equal pitch become single notes."""
    notes: list[NoteEvent] = []
    run_pitch = e.pitches[0]
    run_len = 1
    for p in e.pitches[1:]:
        if p == run_pitch:
            run_len += 1
        else:
            notes.append(NoteEvent(run_pitch, run_len))
            run_pitch, run_len = p, 1
    notes.append(NoteEvent(run_pitch, run_len))
    return MidiSequence(tuple(notes))


def transpose(m: MidiSequence, k: int) -> MidiSequence:
    """Shift every pitch by k semitones; raises RangeError if any leaves the range."""
    return MidiSequence(
        tuple(NoteEvent(n.pitch + k, n.duration) for n in m.notes),
        m.frame_rate_hz,
    )


def round_to_grid(m: MidiSequence, tempo_bpm: float) -> MidiSequence:
    """Snap each duration to the nearest positive multiple of a 1/16-note.

    The grid unit is frame_rate * 60 / tempo / 4 frames; durations never round
    to zero so the note count is preserved.
    """
    if tempo_bpm <= 0:
        raise InvalidInput(f"tempo must be positive, got {tempo_bpm}")
    grid = m.frame_rate_hz * 60.0 / tempo_bpm / 4.0
    notes = []
    for n in m.notes:
        units = max(1, round(n.duration / grid))
        notes.append(NoteEvent(n.pitch, max(1, round(units * grid))))
    return MidiSequence(tuple(notes), m.frame_rate_hz)


def average_pitch(m: MidiSequence) -> float:
    """Duration-weighted mean pitch, in semitones."""
    total = sum(n.pitch * n.duration for n in m.notes)
    return total / m.total_frames


# ---------------------------------------------------------------------------
# Interchange formats
# ---------------------------------------------------------------------------

def to_json_dict(m: MidiSequence) -> dict:
    return {"frame_rate": m.frame_rate_hz, "notes": [[n.pitch, n.duration] for n in m.notes]}


def from_json_dict(d: dict) -> MidiSequence:
    try:
        notes = d["notes"]
        rate = float(d.get("frame_rate", FRAME_RATE_HZ))
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"bad MIDI json: {exc}") from exc
    return MidiSequence.from_pairs([(int(p), int(dur)) for p, dur in notes], rate)


def save_json(m: MidiSequence, path) -> None:
    with open(path, "w") as f:
        json.dump(to_json_dict(m), f)


def load_json(path) -> MidiSequence:
    with open(path) as f:
        return from_json_dict(json.load(f))


def save_ndjson(m: MidiSequence, path) -> None:
    """One note record per line: {"pitch": p, "duration": d}."""
    with open(path, "w") as f:
        f.write(json.dumps({"frame_rate": m.frame_rate_hz}) + "\n")
        for n in m.notes:
            f.write(json.dumps({"pitch": n.pitch, "duration": n.duration}) + "\n")


def load_ndjson(path) -> MidiSequence:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or "frame_rate" not in lines[0]:
        raise InvalidInput("ndjson melody must start with a frame_rate header line")
    rate = float(lines[0]["frame_rate"])
    return MidiSequence.from_pairs([(r["pitch"], r["duration"]) for r in lines[1:]], rate)


# Standard MIDI file, format 0, one track. Ticks are chosen so one frame maps
# to an integer tick count (tpq=500 at tempo 500000 us -> 1 tick = 1 ms, one
# 20 ms frame = 20 ticks), making write/read round-trips exact.
_SMF_TPQ = 500
_SMF_TEMPO_US = 500_000
_TICKS_PER_FRAME = 20


def _write_varlen(value: int) -> bytes:
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(chunks))


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    while True:
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos


def save_smf(m: MidiSequence, path) -> None:
    track = bytearray()
    track += _write_varlen(0) + bytes([0xFF, 0x51, 0x03]) + _SMF_TEMPO_US.to_bytes(3, "big")
    delta = 0
    for n in m.notes:
        track += _write_varlen(delta) + bytes([0x90, n.pitch, 0x60])
        ticks = n.duration * _TICKS_PER_FRAME
        track += _write_varlen(ticks) + bytes([0x80, n.pitch, 0x00])
        delta = 0
    track += _write_varlen(0) + bytes([0xFF, 0x2F, 0x00])
    with open(path, "wb") as f:
        f.write(b"MThd" + struct.pack(">IHHH", 6, 0, 1, _SMF_TPQ))
        f.write(b"MTrk" + struct.pack(">I", len(track)) + bytes(track))


def load_smf(path) -> MidiSequence:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"MThd":
        raise InvalidInput("not a standard MIDI file")
    tpq = struct.unpack(">H", data[12:14])[0]
    pos = data.index(b"MTrk") + 4
    (length,) = struct.unpack(">I", data[pos:pos + 4])
    pos += 4
    end = pos + length
    tempo_us = _SMF_TEMPO_US
    notes: list[tuple[int, int]] = []
    on_tick: dict[int, int] = {}
    tick = 0
    running = 0
    while pos < end:
        delta, pos = _read_varlen(data, pos)
        tick += delta
        status = data[pos]
        if status & 0x80:
            pos += 1
            running = status
        else:
            status = running
        kind = status & 0xF0
        if status == 0xFF:
            meta = data[pos]
            ln, pos = _read_varlen(data, pos + 1)
            if meta == 0x51:
                tempo_us = int.from_bytes(data[pos:pos + 3], "big")
            pos += ln
        elif kind in (0x90, 0x80):
            note, vel = data[pos], data[pos + 1]
            pos += 2
            if kind == 0x90 and vel > 0:
                on_tick[note] = tick
            elif note in on_tick:
                start = on_tick.pop(note)
                notes.append((start, note, tick - start))
        else:
            raise InvalidInput(f"unsupported MIDI event 0x{status:02x}")
    notes.sort()
    sec_per_tick = tempo_us / 1e6 / tpq
    pairs = []
    for _start, pitch, dur_ticks in notes:
        frames = max(1, round(dur_ticks * sec_per_tick * FRAME_RATE_HZ))
        pairs.append((pitch, frames))
    return MidiSequence.from_pairs(pairs)

"""Stage 0: lyrics- and prompt-conditioned MIDI generation.

Note events become (pitch, offset) token pairs where the offset slot carries
the cumulative end frame of each note; decoding first-differences the offsets
back into durations, and sampling masks non-increasing offsets so generated
sequences are monotone by construction.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ClipTooLong, EmptyGeneration, GenerationError, MalformedSequence
from .melody import PITCH_MIN, PITCH_MAX, MidiSequence, NoteEvent
from .mslm import ConditionSegment, FrameTokens, GlobalLocalModel, LogitsHook, Sampler, StopStep
from .vocab import BOS, EOS, N_SPECIALS

log = logging.getLogger(__name__)

MAX_FRAMES = 1500  # 30 s at the 50 Hz frame rate
MAX_LYRICS_TOKENS = 80
MAX_PROMPT_TOKENS = 50

PITCH_VOCAB = PITCH_MAX - PITCH_MIN + 1 + N_SPECIALS  # 52
OFFSET_VOCAB = MAX_FRAMES + N_SPECIALS  # offsets 1..MAX_FRAMES
MIDI_VOCAB_SIZES = (PITCH_VOCAB, OFFSET_VOCAB)


def pitch_to_token(pitch: int) -> int:
    return pitch - PITCH_MIN + N_SPECIALS


def token_to_pitch(tok: int) -> int:
    return tok - N_SPECIALS + PITCH_MIN


def offset_to_token(offset: int) -> int:
    return offset - 1 + N_SPECIALS


def token_to_offset(tok: int) -> int:
    return tok - N_SPECIALS + 1


def encode_midi_tokens(m: MidiSequence) -> FrameTokens:
    """(pitch, cumulative-end-offset) pair per note, P=2."""
    if m.total_frames > MAX_FRAMES:
        raise ClipTooLong(f"{m.total_frames} frames exceeds the {MAX_FRAMES}-frame limit")
    offset = 0
    rows = []
    for n in m.notes:
        offset += n.duration
        rows.append((pitch_to_token(n.pitch), offset_to_token(offset)))
    return FrameTokens(np.array(rows, dtype=np.int64), MIDI_VOCAB_SIZES)


def decode_midi_tokens(t: FrameTokens) -> MidiSequence:
    """Durations recovered by first-differencing the offset slot."""
    notes = []
    prev = 0
    for pitch_tok, off_tok in t.tokens:
        offset = token_to_offset(int(off_tok))
        if offset <= prev:
            raise MalformedSequence(f"offset {offset} not greater than previous {prev}")
        notes.append(NoteEvent(token_to_pitch(int(pitch_tok)), offset - prev))
        prev = offset
    return MidiSequence(tuple(notes))


def truncate_ids(ids: Sequence[int], limit: int, what: str) -> list[int]:
    ids = list(ids)
    if len(ids) > limit:
        log.warning("%s truncated from %d to %d tokens", what, len(ids), limit)
        return ids[:limit]
    return ids


def build_stage0_sequence(
    lyrics_ids: Sequence[int],
    prompt_ids: Optional[Sequence[int]] = None,
    target: Optional[FrameTokens] = None,
    append_eos: bool = True,
) -> list[ConditionSegment]:
    """[melody_prompt?, lyrics_semantic, BOS, target...] with loss on target only."""
    segments = []
    if prompt_ids is not None:
        segments.append(ConditionSegment(
            "melody_prompt", np.array(truncate_ids(prompt_ids, MAX_PROMPT_TOKENS, "melody prompt"))))
    segments.append(ConditionSegment(
        "text_semantic", np.array(truncate_ids(lyrics_ids, MAX_LYRICS_TOKENS, "lyrics"))))
    segments.append(ConditionSegment("target", np.full((1, 2), BOS, dtype=np.int64)))
    if target is not None:
        tokens = target.tokens
        if append_eos:
            tokens = np.vstack([tokens, np.full((1, 2), EOS, dtype=np.int64)])
        segments.append(ConditionSegment("target", tokens, loss_mask=True))
    return segments


def make_offset_mask_hook() -> LogitsHook:
    """Bans specials on both slots (except EOS on the pitch slot) and masks
    offsets that would not increase."""

    def hook(tau, step_idx, prev_slot_tokens, step_prefix, logits):
        logits = logits.clone()
        if tau == 0:
            eos_logit = logits[EOS].clone()
            logits[:N_SPECIALS] = float("-inf")
            logits[EOS] = eos_logit
        else:
            logits[:N_SPECIALS] = float("-inf")
            if prev_slot_tokens:
                logits[: prev_slot_tokens[-1] + 1] = float("-inf")
            if not torch.isfinite(logits).any():
                raise StopStep  # offset ceiling reached, end the melody here
        return logits

    return hook


def generate_midi(
    model: GlobalLocalModel,
    lyrics_ids: Sequence[int],
    prompt_ids: Optional[Sequence[int]] = None,
    seed: int = 0,
    sampler: Optional[Sampler] = None,
    max_notes: int = 256,
    retries: int = 3,
) -> MidiSequence:
    """Sample note tokens and decode them to a valid MidiSequence."""
    condition = build_stage0_sequence(lyrics_ids, prompt_ids, target=None)
    hook = make_offset_mask_hook()
    last_error: Optional[Exception] = None
    for attempt in range(retries):
        generator = torch.Generator().manual_seed(seed + attempt)
        try:
            tokens, truncated = model.generate(
                condition, max_steps=max_notes, sampler=sampler,
                eos_token=EOS, logits_hook=hook, generator=generator,
            )
            if truncated:
                log.warning("MIDI generation hit the %d-note cap", max_notes)
            return decode_midi_tokens(tokens)
        except EmptyGeneration as exc:
            log.warning("empty MIDI generation on attempt %d, retrying", attempt)
            last_error = exc
    raise GenerationError("midi", f"no notes generated after {retries} attempts: {last_error}")

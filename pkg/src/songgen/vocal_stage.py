"""Stage 1: MIDI-, lyrics-, and reference-conditioned vocal token generation.

Each generated step carries 4 tokens: the first 3 residual-codec codes and a
quantized F0 bin. With expanded-MIDI conditioning the target length is known,
so decoding is length-forced and never samples an end token.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import AlignmentError, CodecMismatch, InvalidInput
from .melody import PITCH_MIN, PITCH_MAX, ExpandedMelody
from .midi_stage import encode_midi_tokens, pitch_to_token
from .mslm import ConditionSegment, FrameTokens, GlobalLocalModel, Sampler
from .rvq import Codebooks, decode as rvq_decode
from .vocab import BOS, EOS, N_SPECIALS

N_ACOUSTIC_SLOTS = 3
N_F0_BINS = PITCH_MAX - PITCH_MIN + 1  # semitone bins over the vocal range
UNVOICED_BIN = N_F0_BINS  # one extra bin
F0_VOCAB = N_F0_BINS + 1 + N_SPECIALS

VOCAL_UPSAMPLE = 1.5  # 50 Hz tokens -> 75 Hz mel frames


def vocal_vocab_sizes(codebook_size: int) -> tuple[int, ...]:
    return (codebook_size + N_SPECIALS,) * N_ACOUSTIC_SLOTS + (F0_VOCAB,)


def code_to_token(code: int) -> int:
    return code + N_SPECIALS


def token_to_code(tok) -> np.ndarray:
    return np.asarray(tok) - N_SPECIALS


def hz_to_midi(f0_hz: np.ndarray) -> np.ndarray:
    return 69.0 + 12.0 * np.log2(np.asarray(f0_hz, dtype=float) / 440.0)


def bin_to_midi(bin_idx: int) -> int:
    return bin_idx + PITCH_MIN


def bin_center_hz(bin_idx: int) -> float:
    return float(440.0 * 2 ** ((bin_to_midi(bin_idx) - 69) / 12))


def f0_to_bins(f0_hz: Sequence[float], voicing: Sequence[bool]) -> tuple[np.ndarray, int]:
    """Nearest-semitone bins on voiced frames, the unvoiced bin elsewhere.

    Returns (bins, n_clamped); out-of-range voiced pitches clamp to the edge
    bins and are counted rather than rejected.
    """
    f0_hz = np.asarray(f0_hz, dtype=float)
    voicing = np.asarray(voicing, dtype=bool)
    if f0_hz.shape != voicing.shape:
        raise InvalidInput("f0 and voicing must have equal length")
    if np.any(voicing & (f0_hz <= 0)):
        raise InvalidInput("nonpositive f0 on a voiced frame")
    bins = np.full(len(f0_hz), UNVOICED_BIN, dtype=np.int64)
    if voicing.any():
        midi = np.round(hz_to_midi(f0_hz[voicing])).astype(np.int64)
        clamped = int(((midi < PITCH_MIN) | (midi > PITCH_MAX)).sum())
        bins[voicing] = np.clip(midi, PITCH_MIN, PITCH_MAX) - PITCH_MIN
    else:
        clamped = 0
    return bins, clamped


def quantize_f0(f0_hz: Sequence[float], voicing: Sequence[bool]) -> np.ndarray:
    """F0 slot tokens (bin index plus the shared special offset)."""
    bins, _ = f0_to_bins(f0_hz, voicing)
    return bins + N_SPECIALS


def make_vocal_tokens(codes: np.ndarray, f0_hz, voicing, codebook_size: int) -> FrameTokens:
    """Bundle truncated codec codes and the F0 track into a P=4 token grid."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != N_ACOUSTIC_SLOTS:
        raise InvalidInput(f"expected N x {N_ACOUSTIC_SLOTS} codes, got {codes.shape}")
    f0_tok = quantize_f0(f0_hz, voicing)
    if len(f0_tok) != codes.shape[0]:
        raise AlignmentError("F0 track and code sequence lengths differ")
    grid = np.concatenate([codes + N_SPECIALS, f0_tok[:, None]], axis=1)
    return FrameTokens(grid, vocal_vocab_sizes(codebook_size))


def expanded_midi_ids(midi: ExpandedMelody) -> np.ndarray:
    return np.array([pitch_to_token(p) for p in midi.pitches], dtype=np.int64)


def build_stage1_sequence(
    pinyin_ids: Sequence[int],
    midi: Optional[ExpandedMelody],
    ref: FrameTokens,
    target: Optional[FrameTokens] = None,
    unexpanded=None,
    append_eos: bool = False,
) -> list[ConditionSegment]:
    """[pinyin, midi condition, reference, BOS, target] with loss on target.

    The MIDI condition is the frame-expanded pitch stream by default; passing
    `unexpanded` (a MidiSequence) switches to raw (pitch, offset) note pairs
    for the unexpand ablation. With expanded MIDI the target length must match
    the expansion exactly.
    """
    p = ref.p
    segments = [ConditionSegment("pinyin", np.asarray(pinyin_ids, dtype=np.int64))]
    if unexpanded is not None:
        note_tokens = encode_midi_tokens(unexpanded).tokens
        # (pitch, offset) pairs ride in as a flat interleaved text stream so
        # the segment stays P-agnostic
        flat = np.empty(note_tokens.shape[0] * 2, dtype=np.int64)
        flat[0::2] = note_tokens[:, 0]
        flat[1::2] = note_tokens[:, 1]
        segments.append(ConditionSegment("expanded_midi", flat))
    elif midi is not None:
        segments.append(ConditionSegment("expanded_midi", expanded_midi_ids(midi)))
    segments.append(ConditionSegment("reference_acoustic", ref.tokens))
    segments.append(ConditionSegment("target", np.full((1, p), BOS, dtype=np.int64)))
    if target is not None:
        if midi is not None and unexpanded is None and target.n_steps != len(midi):
            raise AlignmentError(
                f"target has {target.n_steps} steps but expanded MIDI has {len(midi)}")
        tokens = target.tokens
        if append_eos:
            tokens = np.vstack([tokens, np.full((1, p), EOS, dtype=np.int64)])
        segments.append(ConditionSegment("target", tokens, loss_mask=True))
    return segments


def generate_vocal(
    model: GlobalLocalModel,
    pinyin_ids: Sequence[int],
    midi: Optional[ExpandedMelody],
    ref: FrameTokens,
    seed: int = 0,
    sampler: Optional[Sampler] = None,
    unexpanded=None,
    max_frames: int = 1500,
) -> FrameTokens:
    """Length-forced when expanded MIDI is present; EOS-terminated otherwise."""
    condition = build_stage1_sequence(pinyin_ids, midi, ref, unexpanded=unexpanded)
    generator = torch.Generator().manual_seed(seed)

    def hook(tau, step_idx, prev_slot_tokens, step_prefix, logits):
        logits = logits.clone()
        eos_logit = logits[EOS].clone()
        logits[:N_SPECIALS] = float("-inf")
        if tau == 0:
            logits[EOS] = eos_logit
        return logits

    forced = len(midi) if (midi is not None and unexpanded is None) else None
    tokens, _ = model.generate(
        condition, max_steps=max_frames, sampler=sampler, eos_token=EOS,
        forced_len=forced, logits_hook=hook, generator=generator,
    )
    return tokens


def render_toy_vocal(
    v: FrameTokens,
    cb: Codebooks,
    projection: np.ndarray,
    expected_hash: Optional[bytes] = None,
) -> np.ndarray:
    """Decode acoustic slots to log-mel frames and upsample to the mel rate.

    The projection is the fixed map used to build codec features from log-mel
    frames; its transpose approximately inverts it.
    """
    if expected_hash is not None and cb.content_hash() != expected_hash:
        raise CodecMismatch("vocal tokens were produced with a different codebook")
    codes = token_to_code(v.tokens[:, :N_ACOUSTIC_SLOTS])
    feats = rvq_decode(codes, cb)  # (N, d_feat)
    logmel_50 = feats @ projection  # (N, n_mels)
    n_out = int(np.ceil(v.n_steps * VOCAL_UPSAMPLE))
    src = np.minimum((np.arange(n_out) / VOCAL_UPSAMPLE).astype(int), v.n_steps - 1)
    return logmel_50[src]


# ---------------------------------------------------------------------------
# Vocal token files: magic, N, P, codec hash, uint16 payload
# ---------------------------------------------------------------------------

_MAGIC = b"VTOK"


def save_vocal_tokens(v: FrameTokens, codec_hash: bytes, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", v.n_steps, v.p))
        f.write(struct.pack("<I", len(v.vocab_sizes)))
        f.write(struct.pack(f"<{len(v.vocab_sizes)}I", *v.vocab_sizes))
        f.write(codec_hash)
        f.write(v.tokens.astype(np.uint16).tobytes())


def load_vocal_tokens(path) -> tuple[FrameTokens, bytes]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise InvalidInput("not a vocal token file")
    n, p = struct.unpack("<II", data[4:12])
    (nv,) = struct.unpack("<I", data[12:16])
    vocab_sizes = struct.unpack(f"<{nv}I", data[16:16 + 4 * nv])
    pos = 16 + 4 * nv
    codec_hash = data[pos:pos + 16]
    tokens = np.frombuffer(data[pos + 16:], dtype=np.uint16).reshape(n, p).astype(np.int64)
    return FrameTokens(tokens, tuple(vocab_sizes)), codec_hash

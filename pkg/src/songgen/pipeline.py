"""End-to-end inference and evaluation.

`sing` chains the three stages: prompt+lyrics -> MIDI, MIDI+lyrics+reference
-> vocal tokens, vocal+prompt -> accompaniment mel, then renders and mixes
audio. Only lyrics and a reference vocal are required; a user-supplied MIDI
sequence skips stage 0 entirely.
"""

from __future__ import annotations

import logging
import random
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .corpus import ClipManifest
from .diffusion import sample_accompaniment
from .errors import EmptyGeneration, GenerationError, SonggenError
from .features import feature_projection, mel_to_audio, remix, save_mel, save_wav
from .keyprompt import N_MELODY_TEMPLATES
from .melody import ExpandedMelody, MidiSequence, compress, expand, save_json
from .metrics import MetricReport, SamplePair, evaluate_corpus
from .midi_stage import generate_midi
from .mslm import ConditionSegment, FrameTokens, GlobalLocalModel, load_checkpoint
from .rvq import load_codebooks
from .training import (
    CorpusData,
    REF_FRAMES,
    load_ldm,
    load_vae,
    require,
)
from .vocab import BOS, EOS, N_SPECIALS, build_prompt_vocab, syllable_vocab
from .vocal_stage import (
    N_ACOUSTIC_SLOTS,
    N_F0_BINS,
    UNVOICED_BIN,
    bin_center_hz,
    generate_vocal,
    render_toy_vocal,
    save_vocal_tokens,
)

log = logging.getLogger(__name__)


def _load_lm(run_dir, stage: str, variant: str = "base") -> GlobalLocalModel:
    model, _ = load_checkpoint(require(run_dir, stage, variant))
    return model


def load_reference(corpus_dir, clip_id: str, run_dir) -> FrameTokens:
    """Build a 2 s reference excerpt from a corpus clip's vocal tokens."""
    data = CorpusData(corpus_dir)
    cb = load_codebooks(require(run_dir, "rvq"))
    by_id = {c.clip_id: c for c in data.clips}
    if clip_id not in by_id:
        raise GenerationError("reference", f"no clip {clip_id!r} in the corpus")
    v = data.vocal_tokens(by_id[clip_id], cb)
    n = min(REF_FRAMES, v.n_steps)
    return FrameTokens(v.tokens[:n], v.vocab_sizes)


def sing(
    run_dir,
    out_dir,
    lyrics: str,
    ref: FrameTokens,
    melody_prompt: Optional[str] = None,
    accomp_prompt: Optional[str] = None,
    midi_override: Optional[MidiSequence] = None,
    seed: int = 0,
) -> dict[str, Path]:
    """Run the full inference chain and write all artifacts to out_dir.

    Returns a name -> path map for midi.json, vocal.tok, vocal.mel,
    accomp.mel, and mix.wav. Deterministic for fixed seed and checkpoints.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    syl = syllable_vocab()
    prompt_vocab = build_prompt_vocab()
    cb = load_codebooks(require(run_dir, "rvq"))

    if midi_override is not None:
        log.info("stage 0 skipped: MIDI override supplied")
        midi = midi_override
    else:
        log.info("stage 0: generating MIDI")
        midi_model = _load_lm(run_dir, "midi")
        prompt_ids = prompt_vocab.encode_text(melody_prompt) if melody_prompt else None
        try:
            midi = generate_midi(midi_model, syl.encode_text(lyrics), prompt_ids, seed=seed)
        except GenerationError:
            raise
        except SonggenError as exc:
            raise GenerationError("midi", str(exc)) from exc
    midi_path = out_dir / "midi.json"
    save_json(midi, midi_path)

    log.info("stage 1: generating vocal tokens (%d frames)", midi.total_frames)
    vocal_model = _load_lm(run_dir, "vocal")
    try:
        vocal = generate_vocal(vocal_model, syl.encode_text(lyrics), expand(midi),
                               ref, seed=seed + 1)
    except SonggenError as exc:
        raise GenerationError("vocal", str(exc)) from exc
    tok_path = out_dir / "vocal.tok"
    save_vocal_tokens(vocal, cb.content_hash(), tok_path)
    vocal_mel = render_toy_vocal(vocal, cb, feature_projection(), cb.content_hash())
    vocal_mel_path = out_dir / "vocal.mel"
    save_mel(vocal_mel, vocal_mel_path)

    log.info("stage 2: generating accompaniment")
    ldm, schedule, blob = load_ldm(run_dir)
    vae = load_vae(run_dir)
    if blob["codec_hash"] != cb.content_hash():
        raise GenerationError("accomp", "diffusion model was trained on a different codec")
    accomp_ids = prompt_vocab.encode_text(accomp_prompt) if accomp_prompt else None
    try:
        accomp_mel = sample_accompaniment(ldm, vae, vocal, accomp_ids, schedule,
                                          seed=seed + 2, guidance=blob["guidance"])
    except SonggenError as exc:
        raise GenerationError("accomp", str(exc)) from exc
    accomp_mel_path = out_dir / "accomp.mel"
    save_mel(accomp_mel, accomp_mel_path)

    vocal_wav = mel_to_audio(vocal_mel, seed=seed + 3)
    accomp_wav = mel_to_audio(accomp_mel, seed=seed + 4)
    mix_path = out_dir / "mix.wav"
    save_wav(remix(vocal_wav, accomp_wav), mix_path)
    return {
        "midi.json": midi_path,
        "vocal.tok": tok_path,
        "vocal.mel": vocal_mel_path,
        "accomp.mel": accomp_mel_path,
        "mix.wav": mix_path,
    }


def f0_track_from_tokens(vocal: FrameTokens) -> tuple[np.ndarray, np.ndarray]:
    """(f0_hz, voicing) from the F0 slot; unvoiced frames report 0 Hz."""
    bins = vocal.tokens[:, N_ACOUSTIC_SLOTS] - N_SPECIALS
    voicing = bins != UNVOICED_BIN
    f0 = np.zeros(len(bins))
    for i, b in enumerate(bins):
        if voicing[i]:
            f0[i] = bin_center_hz(int(b))
    return f0, voicing


def melody_from_tokens(vocal: FrameTokens) -> MidiSequence:
    """Frame-level melody implied by the F0 slot, unvoiced frames carried over."""
    bins = vocal.tokens[:, N_ACOUSTIC_SLOTS] - N_SPECIALS
    pitches = []
    prev = 57
    for b in bins:
        if 0 <= b < N_F0_BINS:
            prev = int(b) + 32
        pitches.append(prev)
    return compress(ExpandedMelody(tuple(pitches)))


def evaluate(
    corpus_dir,
    run_dir,
    seed: int = 0,
    rounded: bool = False,
    limit: Optional[int] = None,
) -> MetricReport:
    """Generate predictions for the holdout split and score them.

    Stage 0 supplies the symbolic metrics (KA/APD/TD/PD/DD/MD); stage 1 run
    on the ground-truth MIDI supplies FFE against the corpus F0 tracks.
    """
    data = CorpusData(corpus_dir)
    if not data.holdout:
        raise GenerationError("evaluate", "corpus has no holdout split")
    cb = load_codebooks(require(run_dir, "rvq"))
    midi_model = _load_lm(run_dir, "midi")
    vocal_model = _load_lm(run_dir, "vocal")
    syl = syllable_vocab()
    prompt_vocab = build_prompt_vocab()
    clips = data.holdout[:limit] if limit else data.holdout
    pairs = []
    skipped = 0
    for i, c in enumerate(clips):
        rng = random.Random(seed * 1000 + i)
        prompt_ids = prompt_vocab.encode_text(data.prompt_text(c, rng))
        try:
            pred_midi = generate_midi(midi_model, syl.encode_text(c.lyrics),
                                      prompt_ids, seed=seed + i)
            vocal = generate_vocal(vocal_model, syl.encode_words(c.pinyin),
                                   expand(data.midi(c)), data.reference(c, cb),
                                   seed=seed + i)
        except (GenerationError, EmptyGeneration):
            skipped += 1
            continue
        pred_f0, pred_v = f0_track_from_tokens(vocal)
        gt_f0, gt_v = data.f0(c)
        n = min(len(gt_f0), len(pred_f0))
        pairs.append(SamplePair(
            gt=data.midi(c), pred=pred_midi, gt_key=c.key, tempo_bpm=c.tempo_bpm,
            gt_f0=gt_f0[:n], gt_voicing=gt_v[:n],
            pred_f0=pred_f0[:n], pred_voicing=pred_v[:n]))
    if not pairs:
        raise GenerationError("evaluate", "every holdout generation failed")
    report = evaluate_corpus(pairs, rounded=rounded)
    report.excluded["generation_failed"] = skipped
    log.info("evaluation exclusions: %s", report.excluded)
    return report


# ---------------------------------------------------------------------------
# Ablation harness: expanded vs unexpanded MIDI, cascaded vs end-to-end
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("base", "cascaded (expand)"),
    ("unexpand", "cascaded (w/o expand)"),
    ("e2e_wmidi", "end-to-end (w/ MIDI)"),
    ("e2e_womidi", "end-to-end (w/o MIDI)"),
)


def _generate_variant(model, variant, c: ClipManifest, data: CorpusData, cb,
                      syl, seed: int) -> Optional[FrameTokens]:
    midi = data.midi(c)
    if variant == "base":
        return generate_vocal(model, syl.encode_words(c.pinyin), expand(midi),
                              data.reference(c, cb), seed=seed)
    if variant == "unexpand":
        return generate_vocal(model, syl.encode_words(c.pinyin), None,
                              data.reference(c, cb), seed=seed,
                              unexpanded=midi, max_frames=midi.total_frames + 100)
    if variant == "e2e_womidi":
        return generate_vocal(model, syl.encode_words(c.pinyin), None,
                              data.reference(c, cb), seed=seed,
                              max_frames=midi.total_frames + 100)
    return _generate_e2e(model, c, data, cb, syl, seed)


def _generate_e2e(model, c: ClipManifest, data: CorpusData, cb, syl, seed: int) -> FrameTokens:
    """Two-phase decode of the joint model: MIDI rows until EOS, then
    length-forced vocal rows after the separator."""
    from .midi_stage import decode_midi_tokens, make_offset_mask_hook
    text = ConditionSegment("text_semantic", np.array(syl.encode_text(c.lyrics)))
    bos = ConditionSegment("target", np.full((1, 4), BOS, dtype=np.int64))
    offset_hook = make_offset_mask_hook()

    def midi_phase_hook(tau, step_idx, prev, prefix, logits):
        if tau >= 2:  # MIDI rows pad the acoustic slots
            out = torch.full_like(logits, float("-inf"))
            out[0] = 0.0
            return out
        if tau == 0:
            logits = logits.clone()
            logits[52:] = float("-inf")  # stay inside the pitch range
        return offset_hook(tau, step_idx, prev, prefix, logits)

    g = torch.Generator().manual_seed(seed)
    midi_rows, _ = model.generate([text, bos], max_steps=128, eos_token=EOS,
                                  logits_hook=midi_phase_hook, generator=g)
    midi = decode_midi_tokens(FrameTokens(midi_rows.tokens[:, :2],
                                          (52, 1503)))
    sep = np.array([[EOS] * 4, [BOS] * 4], dtype=np.int64)
    prefix = np.concatenate([np.full((1, 4), BOS, dtype=np.int64),
                             _pad_midi_rows(midi_rows.tokens[:, :2]), sep])
    condition = [text, ConditionSegment("target", prefix)]

    def vocal_phase_hook(tau, step_idx, prev, prefix_toks, logits):
        logits = logits.clone()
        logits[:N_SPECIALS] = float("-inf")
        if tau < N_ACOUSTIC_SLOTS:
            logits[cb.k + N_SPECIALS:] = float("-inf")
        return logits

    vocal, _ = model.generate(condition, max_steps=midi.total_frames,
                              eos_token=EOS, forced_len=midi.total_frames,
                              logits_hook=vocal_phase_hook, generator=g)
    return vocal


def _pad_midi_rows(tokens2: np.ndarray) -> np.ndarray:
    out = np.zeros((tokens2.shape[0], 4), dtype=np.int64)
    out[:, :2] = tokens2
    return out


def ablation_table(corpus_dir, run_dir, seed: int = 0,
                   limit: Optional[int] = None) -> tuple[dict[str, dict[str, float]], str]:
    """Evaluate all trained vocal variants on the holdout split.

    Returns (per-variant {MD, FFE, n} dict, aligned text table shaped like the
    architecture-comparison table: one row per configuration).
    """
    from .metrics import ffe as ffe_metric, melody_distance
    data = CorpusData(corpus_dir)
    cb = load_codebooks(require(run_dir, "rvq"))
    syl = syllable_vocab()
    clips = data.holdout[:limit] if limit else data.holdout
    results: dict[str, dict[str, float]] = {}
    for variant, label in ABLATION_ROWS:
        model = _load_lm(run_dir, "vocal", variant)
        mds, ffes = [], []
        for i, c in enumerate(clips):
            try:
                vocal = _generate_variant(model, variant, c, data, cb, syl, seed + i)
            except SonggenError:
                continue
            pred_melody = melody_from_tokens(vocal)
            mds.append(melody_distance(data.midi(c), pred_melody))
            pred_f0, pred_v = f0_track_from_tokens(vocal)
            gt_f0, gt_v = data.f0(c)
            n = min(len(gt_f0), len(pred_f0))
            if n:
                ffes.append(ffe_metric(gt_f0[:n], gt_v[:n], pred_f0[:n], pred_v[:n]))
        results[variant] = {
            "MD": float(np.mean(mds)) if mds else float("nan"),
            "FFE": float(np.mean(ffes)) if ffes else float("nan"),
            "n": len(mds),
        }
    header = f"{'configuration':<26} | {'MD':>8} | {'FFE':>8} | {'n':>4}"
    lines = [header, "-" * len(header)]
    for variant, label in ABLATION_ROWS:
        r = results[variant]
        lines.append(f"{label:<26} | {r['MD']:8.3f} | {r['FFE']:8.3f} | {r['n']:4d}")
    return results, "\n".join(lines)

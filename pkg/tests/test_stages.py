"""Stage 0/1 tokenization, sequence assembly, and generation behavior."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from songgen.errors import AlignmentError, ClipTooLong, InvalidInput, MalformedSequence
from songgen.melody import MidiSequence, NoteEvent, expand
from songgen.midi_stage import (
    MAX_FRAMES,
    MIDI_VOCAB_SIZES,
    OFFSET_VOCAB,
    PITCH_VOCAB,
    build_stage0_sequence,
    decode_midi_tokens,
    encode_midi_tokens,
    generate_midi,
    truncate_ids,
)
from songgen.mslm import FrameTokens, GlobalLocalModel, ModelConfig, Sampler
from songgen.vocab import BOS, EOS, N_SPECIALS, syllable_vocab
from songgen.vocal_stage import (
    F0_VOCAB,
    N_ACOUSTIC_SLOTS,
    UNVOICED_BIN,
    bin_center_hz,
    build_stage1_sequence,
    f0_to_bins,
    generate_vocal,
    load_vocal_tokens,
    make_vocal_tokens,
    quantize_f0,
    save_vocal_tokens,
    vocal_vocab_sizes,
)


def seq(pairs):
    return MidiSequence(tuple(NoteEvent(p, d) for p, d in pairs))


class TestMidiTokens:
    def test_worked_example(self):
        # [TRIVIAL] (60,3),(62,2) -> cumulative offsets 3, 5
        t = encode_midi_tokens(seq([(60, 3), (62, 2)]))
        assert t.tokens.tolist() == [[60 - 32 + 3, 3 - 1 + 3], [62 - 32 + 3, 5 - 1 + 3]]

    def test_vocab_sizes(self):
        # [TRIVIAL] 49 pitches + 3 specials; 1500 offsets + 3 specials
        assert PITCH_VOCAB == 52
        assert OFFSET_VOCAB == 1503

    @given(st.lists(st.tuples(st.integers(32, 80), st.integers(1, 40)),
                    min_size=1, max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip(self, pairs):
        m = seq(pairs)
        assert decode_midi_tokens(encode_midi_tokens(m)) == m

    def test_max_frames_boundary(self):
        encode_midi_tokens(seq([(60, MAX_FRAMES)]))
        with pytest.raises(ClipTooLong):
            encode_midi_tokens(seq([(60, MAX_FRAMES + 1)]))

    def test_nonmonotone_offsets_rejected(self):
        t = encode_midi_tokens(seq([(60, 3), (62, 2)]))
        bad = t.tokens.copy()
        bad[1, 1] = bad[0, 1]  # repeat offset
        with pytest.raises(MalformedSequence):
            decode_midi_tokens(FrameTokens(bad, MIDI_VOCAB_SIZES))

    def test_truncate_warns(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="songgen.midi_stage"):
            out = truncate_ids(list(range(100)), 80, "lyrics")
        assert len(out) == 80
        assert "truncated" in caplog.text


class TestStage0Sequence:
    def test_layout_and_loss_mask(self):
        t = encode_midi_tokens(seq([(60, 3), (62, 2)]))
        segs = build_stage0_sequence([5, 6, 7], prompt_ids=[4], target=t)
        kinds = [s.kind for s in segs]
        assert kinds == ["melody_prompt", "text_semantic", "target", "target"]
        assert not segs[2].loss_mask and segs[3].loss_mask
        assert segs[2].tokens.tolist() == [[BOS, BOS]]
        assert segs[3].tokens[-1].tolist() == [EOS, EOS]  # appended EOS row

    def test_no_prompt(self):
        segs = build_stage0_sequence([5, 6])
        assert [s.kind for s in segs] == ["text_semantic", "target"]


def tiny_midi_model():
    cfg = ModelConfig(
        vocab_sizes=MIDI_VOCAB_SIZES,
        text_vocabs={"text_semantic": 32, "melody_prompt": 32},
        d_slot=16, d_global=32, n_global_layers=1, n_global_heads=2,
        d_local=16, n_local_layers=1, n_local_heads=2,
        text_encoder_layers=0, max_steps=64,
    )
    torch.manual_seed(0)
    return GlobalLocalModel(cfg)


class TestGenerateMidi:
    def test_generated_sequence_is_valid(self):
        model = tiny_midi_model()
        m = generate_midi(model, [5, 6, 7], prompt_ids=[4], seed=3, max_notes=12)
        assert len(m.notes) >= 1
        offsets = np.cumsum([n.duration for n in m.notes])
        assert np.all(np.diff(offsets) > 0) if len(offsets) > 1 else True
        assert all(32 <= n.pitch <= 80 for n in m.notes)

    def test_seed_determinism(self):
        model = tiny_midi_model()
        a = generate_midi(model, [5, 6], seed=11, max_notes=10)
        b = generate_midi(model, [5, 6], seed=11, max_notes=10)
        assert a == b


class TestF0:
    def test_a440_maps_to_midi_69(self):
        bins, _ = f0_to_bins([440.0], [True])
        assert bins[0] == 69 - 32

    def test_middle_c(self):
        bins, _ = f0_to_bins([261.63], [True])
        assert bins[0] == 60 - 32

    def test_unvoiced_bin(self):
        bins, _ = f0_to_bins([0.0, 440.0], [False, True])
        assert bins[0] == UNVOICED_BIN == 49

    def test_out_of_range_clamps_and_counts(self):
        bins, clamped = f0_to_bins([20.0, 4000.0, 440.0], [True, True, True])
        assert clamped == 2
        assert bins[0] == 0 and bins[1] == 80 - 32

    def test_nonpositive_voiced_rejected(self):
        with pytest.raises(InvalidInput):
            f0_to_bins([0.0], [True])

    def test_bin_center_roundtrip(self):
        for b in (0, 24, 48):
            got, _ = f0_to_bins([bin_center_hz(b)], [True])
            assert got[0] == b

    def test_quantize_offsets_specials(self):
        toks = quantize_f0([440.0], [True])
        assert toks[0] == (69 - 32) + N_SPECIALS
        assert F0_VOCAB == 53


class TestVocalTokens:
    def make(self, n=6, k=16, rng_seed=0):
        rng = np.random.default_rng(rng_seed)
        codes = rng.integers(0, k, size=(n, N_ACOUSTIC_SLOTS))
        f0 = 220.0 * 2 ** (rng.integers(0, 12, n) / 12)
        return make_vocal_tokens(codes, f0, np.ones(n, bool), k)

    def test_shape_and_vocabs(self):
        v = self.make()
        assert v.p == 4
        assert v.vocab_sizes == vocal_vocab_sizes(16) == (19, 19, 19, 53)

    def test_misaligned_f0_rejected(self):
        with pytest.raises(AlignmentError):
            make_vocal_tokens(np.zeros((4, 3), int), [440.0] * 3, [True] * 3, 16)

    def test_file_roundtrip(self, tmp_path):
        v = self.make(n=9)
        h = bytes(range(16))
        path = tmp_path / "x.tok"
        save_vocal_tokens(v, h, path)
        v2, h2 = load_vocal_tokens(path)
        assert h2 == h
        assert np.array_equal(v.tokens, v2.tokens)
        assert v.vocab_sizes == v2.vocab_sizes


def tiny_vocal_model(k=8):
    cfg = ModelConfig(
        vocab_sizes=vocal_vocab_sizes(k),
        text_vocabs={"pinyin": 32, "expanded_midi": OFFSET_VOCAB},
        d_slot=16, d_global=32, n_global_layers=1, n_global_heads=2,
        d_local=16, n_local_layers=1, n_local_heads=2,
        text_encoder_layers=0, max_steps=128,
    )
    torch.manual_seed(1)
    return GlobalLocalModel(cfg)


class TestStage1Sequence:
    def test_alignment_enforced(self):
        m = seq([(60, 3), (62, 2)])
        ref = FrameTokens(np.full((3, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        target = FrameTokens(np.full((4, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        with pytest.raises(AlignmentError):
            build_stage1_sequence([5], expand(m), ref, target=target)

    def test_expanded_layout(self):
        m = seq([(60, 2), (62, 1)])
        ref = FrameTokens(np.full((2, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        segs = build_stage1_sequence([5, 6], expand(m), ref)
        assert [s.kind for s in segs] == [
            "pinyin", "expanded_midi", "reference_acoustic", "target"]
        assert segs[1].tokens.tolist() == [60 - 32 + 3] * 2 + [62 - 32 + 3]

    def test_unexpanded_interleaves_pairs(self):
        m = seq([(60, 3), (62, 2)])
        ref = FrameTokens(np.full((2, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        segs = build_stage1_sequence([5], None, ref, unexpanded=m)
        flat = segs[1].tokens.tolist()
        assert flat == [60 - 32 + 3, 3 - 1 + 3, 62 - 32 + 3, 5 - 1 + 3]

    def test_length_forcing(self):
        model = tiny_vocal_model()
        m = seq([(60, 4), (64, 3)])
        ref = FrameTokens(np.full((3, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        v = generate_vocal(model, [5, 6], expand(m), ref, seed=2)
        assert v.n_steps == 7  # exactly the expanded MIDI length
        assert np.all(v.tokens >= N_SPECIALS)  # no specials inside the grid

    def test_length_forced_determinism(self):
        model = tiny_vocal_model()
        m = seq([(60, 5)])
        ref = FrameTokens(np.full((2, 4), 4, dtype=np.int64), vocal_vocab_sizes(8))
        a = generate_vocal(model, [5], expand(m), ref, seed=9)
        b = generate_vocal(model, [5], expand(m), ref, seed=9)
        assert np.array_equal(a.tokens, b.tokens)

"""Training orchestration: per-stage smoke trainers over the synthetic corpus.

The three generative stages train separately; the codec (RVQ) and the mel VAE
are fit first because the vocal LM and the latent diffusion model consume
their outputs. Stage prerequisites are enforced with DependencyError so the
CLI can map them to a distinct exit code.
"""

from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import validate_config
from .corpus import ClipManifest, load_manifests
from .diffusion import (
    Denoiser,
    MelVAE,
    NoiseSchedule,
    latent_length,
    train_loss as ldm_loss,
)
from .errors import DependencyError, InsufficientData, InvalidInput
from .features import load_mel
from .keyprompt import PromptBundle, apply_condition_dropout, bin_attributes, render_prompt, N_MELODY_TEMPLATES
from .melody import MidiSequence, NoteEvent, expand, load_json
from .midi_stage import OFFSET_VOCAB, PITCH_VOCAB, build_stage0_sequence, encode_midi_tokens
from .mslm import (
    ConditionSegment,
    FrameTokens,
    GlobalLocalModel,
    ModelConfig,
    save_checkpoint,
)
from .rvq import Codebooks, encode as rvq_encode, fit as rvq_fit, load_codebooks, save_codebooks, truncate
from .vocab import BOS, EOS, Vocab, build_prompt_vocab, syllable_vocab
from .vocal_stage import (
    F0_VOCAB,
    N_ACOUSTIC_SLOTS,
    build_stage1_sequence,
    make_vocal_tokens,
    vocal_vocab_sizes,
)

log = logging.getLogger(__name__)

STAGES = ("rvq", "vae", "midi", "vocal", "ldm")
STAGE_DEPS = {"rvq": (), "vae": (), "midi": (), "vocal": ("rvq",), "ldm": ("rvq", "vae")}
VOCAL_VARIANTS = ("base", "unexpand", "e2e_womidi", "e2e_wmidi")

REF_FRAMES = 100  # 2 s reference excerpt


def checkpoint_name(stage: str, variant: str = "base") -> str:
    if stage == "rvq":
        return "rvq.bin"
    if stage == "vocal" and variant != "base":
        return f"vocal_{variant}.pt"
    return f"{stage}.pt"


class CorpusData:
    """Lazy, cached reader for corpus artifacts keyed by clip id."""

    def __init__(self, corpus_dir):
        self.root = Path(corpus_dir)
        manifest = self.root / "manifest.ndjson"
        if not manifest.exists():
            raise DependencyError(f"no corpus manifest at {manifest}")
        self.clips = load_manifests(manifest)
        self.train = [c for c in self.clips if c.split == "train"]
        self.holdout = [c for c in self.clips if c.split == "holdout"]
        self._cache: dict[tuple, object] = {}

    def _get(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def midi(self, c: ClipManifest) -> MidiSequence:
        return self._get(("midi", c.clip_id), lambda: load_json(self.root / c.midi_path))

    def midi_variant(self, c: ClipManifest, i: int) -> MidiSequence:
        return self._get(("var", c.clip_id, i),
                         lambda: load_json(self.root / c.midi_variant_paths[i]))

    def feats(self, c: ClipManifest) -> np.ndarray:
        return self._get(("feat", c.clip_id), lambda: load_mel(self.root / c.feat_path))

    def f0(self, c: ClipManifest) -> tuple[np.ndarray, np.ndarray]:
        arr = self._get(("f0", c.clip_id), lambda: load_mel(self.root / c.f0_path))
        return arr[:, 0], arr[:, 1] > 0.5

    def accomp_mel(self, c: ClipManifest) -> np.ndarray:
        return self._get(("amel", c.clip_id), lambda: load_mel(self.root / c.accomp_mel_path))

    def vocal_tokens(self, c: ClipManifest, cb: Codebooks) -> FrameTokens:
        def build():
            feats = self.feats(c)
            f0, voicing = self.f0(c)
            n = min(len(feats), len(f0), self.midi(c).total_frames)
            codes = truncate(rvq_encode(feats[:n], cb), N_ACOUSTIC_SLOTS)
            return make_vocal_tokens(codes, f0[:n], voicing[:n], cb.k)
        return self._get(("vtok", c.clip_id, cb.content_hash()), build)

    def reference(self, c: ClipManifest, cb: Codebooks) -> FrameTokens:
        """First 2 s of another clip by the same synthetic singer."""
        pool = [x for x in self.train if x.singer_id == c.singer_id and x.clip_id != c.clip_id]
        donor = pool[0] if pool else c
        v = self.vocal_tokens(donor, cb)
        n = min(REF_FRAMES, v.n_steps)
        return FrameTokens(v.tokens[:n], v.vocab_sizes)

    def prompt_text(self, c: ClipManifest, rng: random.Random) -> str:
        attrs = bin_attributes(self.midi(c), c.tempo_bpm, c.tempo_conf, c.emotion_keywords)
        return render_prompt(attrs, rng.randrange(N_MELODY_TEMPLATES), rng)


def require(run_dir: Path, stage: str, variant: str = "base") -> Path:
    path = Path(run_dir) / checkpoint_name(stage, variant)
    if not path.exists():
        raise DependencyError(f"stage {stage!r} checkpoint missing at {path}")
    return path


def _write_curve(run_dir: Path, name: str, losses: list[float]) -> dict:
    curve = {
        "losses": losses,
        "initial": losses[0],
        "final": losses[-1],
        "halved": losses[-1] < 0.5 * losses[0],
    }
    with open(Path(run_dir) / f"{name}.curve.json", "w") as f:
        json.dump(curve, f)
    if not curve["halved"]:
        log.warning("%s loss did not halve: %.4f -> %.4f", name, losses[0], losses[-1])
    return curve


def _smoothed_endpoints(losses: list[float], k: int = 10) -> list[float]:
    k = min(k, max(1, len(losses) // 4))
    return [float(np.mean(losses[:k]))] + losses[1:-1] + [float(np.mean(losses[-k:]))]


def train_rvq(config, data: CorpusData, run_dir: Path, seed: int = 0) -> dict:
    cc = config["codec"]
    frames = np.concatenate([data.feats(c) for c in data.train])
    if frames.shape[0] < cc["codebook_size"]:
        raise InsufficientData("too few feature frames for the requested codebook size")
    rng = np.random.default_rng(seed)
    take = min(len(frames), 20_000)
    frames = frames[rng.permutation(len(frames))[:take]]
    cb = rvq_fit(frames, n_q=cc["n_codebooks"], k=cc["codebook_size"], seed=seed)
    save_codebooks(cb, Path(run_dir) / checkpoint_name("rvq"))
    # residual energy per depth doubles as the training curve
    residual = frames.copy()
    losses = [float((residual ** 2).mean())]
    for q in range(cb.n_q):
        codes = rvq_encode(frames, cb)[:, :q + 1]
        recon = np.zeros_like(frames)
        for j in range(q + 1):
            recon += cb.books[j][codes[:, j].astype(int)]
        losses.append(float(((frames - recon) ** 2).mean()))
    return _write_curve(run_dir, "rvq", losses)


def train_vae(config, data: CorpusData, run_dir: Path, seed: int = 0) -> dict:
    vc = config["vae"]
    torch.manual_seed(seed)
    vae = MelVAE(d_latent=vc["d_latent"], hidden=vc["hidden"])
    opt = torch.optim.Adam(vae.parameters(), lr=vc["lr"])
    g = torch.Generator().manual_seed(seed)
    mels = [torch.as_tensor(data.accomp_mel(c), dtype=torch.float32) for c in data.train]
    losses = []
    for step in range(vc["steps"]):
        mel = mels[int(torch.randint(len(mels), (1,), generator=g))]
        if mel.shape[0] > 128:
            start = int(torch.randint(mel.shape[0] - 128, (1,), generator=g))
            mel = mel[start:start + 128]
        loss = vae.loss(mel, generator=g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    torch.save({"state": vae.state_dict(), "d_latent": vc["d_latent"], "hidden": vc["hidden"]},
               Path(run_dir) / checkpoint_name("vae"))
    return _write_curve(run_dir, "vae", _smoothed_endpoints(losses))


def load_vae(run_dir) -> MelVAE:
    blob = torch.load(require(run_dir, "vae"), weights_only=False)
    vae = MelVAE(d_latent=blob["d_latent"], hidden=blob["hidden"])
    vae.load_state_dict(blob["state"])
    vae.eval()
    return vae


def _lm_config(section, vocab_sizes, text_vocabs) -> ModelConfig:
    return ModelConfig(
        vocab_sizes=tuple(vocab_sizes),
        text_vocabs=dict(text_vocabs),
        d_slot=section["d_slot"],
        d_global=section["d_global"],
        n_global_layers=section["n_global_layers"],
        n_global_heads=section["n_global_heads"],
        d_local=section["d_local"],
        n_local_layers=section["n_local_layers"],
        n_local_heads=section["n_local_heads"],
        text_encoder_layers=section["text_encoder_layers"],
    )


def _run_lm(model, make_segments, section, seed, n_items) -> list[float]:
    opt = torch.optim.Adam(model.parameters(), lr=section["lr"],
                           betas=tuple(section["adam_betas"]), eps=section["adam_eps"])
    rng = random.Random(seed)
    losses = []
    for step in range(section["steps"]):
        segments = make_segments(rng.randrange(n_items), rng)
        loss = model.nll_loss(segments)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def train_midi(config, data: CorpusData, run_dir: Path, seed: int = 0) -> dict:
    section = config["midi_lm"]
    syl = syllable_vocab()
    prompt_vocab = build_prompt_vocab()
    torch.manual_seed(seed)
    model = GlobalLocalModel(_lm_config(
        section, (PITCH_VOCAB, OFFSET_VOCAB),
        {"text_semantic": len(syl), "melody_prompt": len(prompt_vocab)}))
    drop = config["dropout"]

    def make_segments(i, rng):
        c = data.train[i]
        variant = rng.randrange(1 + len(c.midi_variant_paths))
        midi = data.midi(c) if variant == 0 else data.midi_variant(c, variant - 1)
        bundle = apply_condition_dropout(
            PromptBundle(c.lyrics, data.prompt_text(c, rng)), rng,
            p_each=drop["p_each"], p_joint=drop["p_joint"])
        prompt_ids = (prompt_vocab.encode_text(bundle.melody_prompt)
                      if bundle.melody_prompt else None)
        return build_stage0_sequence(
            syl.encode_text(bundle.lyrics_text), prompt_ids, encode_midi_tokens(midi))

    losses = _run_lm(model, make_segments, section, seed, len(data.train))
    save_checkpoint(model, Path(run_dir) / checkpoint_name("midi"), extra={"stage": "midi"})
    return _write_curve(run_dir, "midi", _smoothed_endpoints(losses))


def _e2e_vocab_sizes(k: int) -> tuple[int, ...]:
    # shared slots carry MIDI tokens in the prefix and codec tokens after the
    # separator; sizes take the union of both ranges
    return (max(PITCH_VOCAB, k + 3), max(OFFSET_VOCAB, k + 3), k + 3, F0_VOCAB)


def e2e_rows(midi_tokens: np.ndarray, vocal_tokens: np.ndarray) -> np.ndarray:
    """[midi rows (PAD-padded to P=4), EOS row, BOS row, vocal rows]."""
    p = 4
    midi_part = np.zeros((midi_tokens.shape[0], p), dtype=np.int64)
    midi_part[:, :2] = midi_tokens
    sep = np.array([[EOS] * p, [BOS] * p], dtype=np.int64)
    return np.concatenate([midi_part, sep, vocal_tokens])


def train_vocal(config, data: CorpusData, run_dir: Path, seed: int = 0,
                variant: str = "base") -> dict:
    if variant not in VOCAL_VARIANTS:
        raise InvalidInput(f"unknown vocal variant {variant!r}")
    section = config["vocal_lm"]
    cb = load_codebooks(require(run_dir, "rvq"))
    syl = syllable_vocab()
    torch.manual_seed(seed)

    if variant == "e2e_wmidi":
        model = GlobalLocalModel(_lm_config(
            section, _e2e_vocab_sizes(cb.k), {"text_semantic": len(syl)}))

        def make_segments(i, rng):
            c = data.train[i]
            rows = e2e_rows(encode_midi_tokens(data.midi(c)).tokens,
                            data.vocal_tokens(c, cb).tokens)
            rows = np.vstack([rows, np.full((1, 4), EOS, dtype=np.int64)])
            return [
                ConditionSegment("text_semantic", np.array(syl.encode_text(c.lyrics))),
                ConditionSegment("target", np.full((1, 4), BOS, dtype=np.int64)),
                ConditionSegment("target", rows, loss_mask=True),
            ]
    else:
        model = GlobalLocalModel(_lm_config(
            section, vocal_vocab_sizes(cb.k),
            {"pinyin": len(syl), "expanded_midi": OFFSET_VOCAB}))

        def make_segments(i, rng):
            c = data.train[i]
            target = data.vocal_tokens(c, cb)
            midi = data.midi(c)
            if target.n_steps != midi.total_frames:
                midi = _trim_midi(midi, target.n_steps)
            return build_stage1_sequence(
                syl.encode_words(c.pinyin),
                expand(midi) if variant == "base" else None,
                data.reference(c, cb), target=target,
                unexpanded=midi if variant == "unexpand" else None,
                append_eos=variant != "base")

    losses = _run_lm(model, make_segments, section, seed, len(data.train))
    save_checkpoint(model, Path(run_dir) / checkpoint_name("vocal", variant),
                    extra={"stage": "vocal", "variant": variant, "codec_hash": cb.content_hash()})
    return _write_curve(run_dir, f"vocal_{variant}" if variant != "base" else "vocal",
                        _smoothed_endpoints(losses))


def _trim_midi(m: MidiSequence, n_frames: int) -> MidiSequence:
    """Clamp a melody to exactly n_frames by shortening or dropping tail notes."""
    notes = []
    total = 0
    for n in m.notes:
        if total + n.duration >= n_frames:
            if n_frames - total > 0:
                notes.append(NoteEvent(n.pitch, n_frames - total))
            break
        notes.append(n)
        total += n.duration
    return MidiSequence(tuple(notes))


def train_ldm(config, data: CorpusData, run_dir: Path, seed: int = 0) -> dict:
    lc = config["ldm"]
    cb = load_codebooks(require(run_dir, "rvq"))
    vae = load_vae(run_dir)
    prompt_vocab = build_prompt_vocab()
    torch.manual_seed(seed)
    model = Denoiser(codebook_size=cb.k, prompt_vocab=len(prompt_vocab),
                     d=lc["d"], layers=lc["layers"], heads=lc["heads"])
    schedule = NoiseSchedule.linear(lc["t_max"], lc["beta_start"], lc["beta_end"])
    opt = torch.optim.Adam(model.parameters(), lr=lc["lr"])
    g = torch.Generator().manual_seed(seed)
    rng = random.Random(seed)
    drop = config["dropout"]
    losses = []
    for step in range(lc["steps"]):
        c = data.train[rng.randrange(len(data.train))]
        vocal = data.vocal_tokens(c, cb)
        n_lat = latent_length(vocal.n_steps)
        mel = torch.as_tensor(data.accomp_mel(c)[:2 * n_lat], dtype=torch.float32)
        with torch.no_grad():
            _, _, z0 = vae.encode(mel, sample=False)
        z0 = z0[:n_lat]
        a = model.embed_vocal_condition(vocal, n_lat)
        s = model.embed_prompt(prompt_vocab.encode_text(data.prompt_text(c, rng)))
        loss = ldm_loss(model, z0, a, s, schedule, generator=g,
                        p_each=drop["p_each"], p_joint=drop["p_joint"])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    torch.save({
        "state": model.state_dict(),
        "codebook_size": cb.k, "prompt_vocab": len(prompt_vocab),
        "d": lc["d"], "layers": lc["layers"], "heads": lc["heads"],
        "t_max": lc["t_max"], "beta_start": lc["beta_start"], "beta_end": lc["beta_end"],
        "guidance": lc["guidance"], "codec_hash": cb.content_hash(),
    }, Path(run_dir) / checkpoint_name("ldm"))
    return _write_curve(run_dir, "ldm", _smoothed_endpoints(losses))


def load_ldm(run_dir) -> tuple[Denoiser, NoiseSchedule, dict]:
    blob = torch.load(require(run_dir, "ldm"), weights_only=False)
    model = Denoiser(codebook_size=blob["codebook_size"], prompt_vocab=blob["prompt_vocab"],
                     d=blob["d"], layers=blob["layers"], heads=blob["heads"])
    model.load_state_dict(blob["state"])
    model.eval()
    schedule = NoiseSchedule.linear(blob["t_max"], blob["beta_start"], blob["beta_end"])
    return model, schedule, blob


_TRAINERS = {"rvq": train_rvq, "vae": train_vae, "midi": train_midi,
             "vocal": train_vocal, "ldm": train_ldm}


def train(stage: str, config, corpus_dir, run_dir, seed: int = 0,
          variant: str = "base") -> dict:
    """Run one stage's smoke training; prerequisites must already exist."""
    if stage not in STAGES:
        raise InvalidInput(f"unknown stage {stage!r}; choose from {STAGES}")
    config = validate_config(config)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for dep in STAGE_DEPS[stage]:
        require(run_dir, dep)
    data = CorpusData(corpus_dir)
    if stage == "vocal":
        return train_vocal(config, data, run_dir, seed, variant)
    return _TRAINERS[stage](config, data, run_dir, seed)

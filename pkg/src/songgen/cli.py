"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing dependency/artifact,
4 generation failure. Training commands take an exclusive lock on the run
directory so concurrent runs cannot interleave checkpoints.
"""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click

from .config import get_preset, load_config
from .errors import (
    ConfigError,
    DependencyError,
    EmptyGeneration,
    GenerationError,
    SonggenError,
)

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_GENERATION = 4

_LOCK_NAME = ".songgen.lock"


class RunLock:
    """Exclusive ownership of a run directory via an O_EXCL lock file."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / _LOCK_NAME
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory is locked by another process ({self.path})")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except DependencyError as exc:
            click.echo(f"dependency error: {exc}", err=True)
            sys.exit(EXIT_DEPENDENCY)
        except (GenerationError, EmptyGeneration) as exc:
            click.echo(f"generation failed: {exc}", err=True)
            sys.exit(EXIT_GENERATION)
        except SonggenError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _config(path):
    return load_config(path) if path else get_preset("desk")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info logging.")
def main(verbose):
    """Desk-scale text-to-song pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("prepare-synth")
@click.option("--out", required=True, type=click.Path())
@click.option("--n-clips", default=200, show_default=True)
@click.option("--n-singers", default=4, show_default=True)
@click.option("--holdout-frac", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def prepare_synth(out, n_clips, n_singers, holdout_frac, seed):
    """Generate the synthetic corpus and its manifest."""
    from .corpus import SynthCorpusSpec, make_synth_corpus
    spec = SynthCorpusSpec(n_clips=n_clips, n_singers=n_singers, holdout_frac=holdout_frac)
    clips = make_synth_corpus(spec, seed, out)
    click.echo(f"wrote {len(clips)} clips to {out}")


def _train_command(name, stage):
    @main.command(name)
    @click.option("--corpus", required=True, type=click.Path(exists=True))
    @click.option("--run", required=True, type=click.Path())
    @click.option("--config", "config_path", type=click.Path(exists=True))
    @click.option("--seed", default=0, show_default=True)
    @click.option("--variant", default="base", show_default=True,
                  help="Vocal-LM ablation variant." if stage == "vocal" else "Unused.")
    @handle_errors
    def cmd(corpus, run, config_path, seed, variant):
        from .training import train
        with RunLock(run):
            curve = train(stage, _config(config_path), corpus, run, seed=seed, variant=variant)
        click.echo(f"{stage} loss {curve['initial']:.4f} -> {curve['final']:.4f}"
                   f" (halved: {curve['halved']})")
    cmd.__doc__ = f"Train the {stage} stage."
    return cmd


fit_rvq = _train_command("fit-rvq", "rvq")
train_vae = _train_command("train-vae", "vae")
train_midi_lm = _train_command("train-midi-lm", "midi")
train_vocal_lm = _train_command("train-vocal-lm", "vocal")
train_ldm = _train_command("train-ldm", "ldm")


@main.command("generate-midi")
@click.option("--run", required=True, type=click.Path(exists=True))
@click.option("--lyrics", required=True)
@click.option("--prompt", default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def generate_midi_cmd(run, lyrics, prompt, seed, out):
    """Stage 0: lyrics (+ optional melody prompt) to MIDI."""
    from .melody import save_json
    from .midi_stage import generate_midi
    from .mslm import load_checkpoint
    from .training import require
    from .vocab import build_prompt_vocab, syllable_vocab
    model, _ = load_checkpoint(require(run, "midi"))
    prompt_ids = build_prompt_vocab().encode_text(prompt) if prompt else None
    midi = generate_midi(model, syllable_vocab().encode_text(lyrics), prompt_ids, seed=seed)
    save_json(midi, out)
    click.echo(f"wrote {len(midi.notes)} notes ({midi.total_seconds:.1f} s) to {out}")


@main.command("generate-vocal")
@click.option("--run", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--midi", "midi_path", required=True, type=click.Path(exists=True))
@click.option("--lyrics", required=True)
@click.option("--ref-clip", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def generate_vocal_cmd(run, corpus, midi_path, lyrics, ref_clip, seed, out):
    """Stage 1: MIDI + lyrics + reference to vocal tokens."""
    from .melody import expand, load_json
    from .mslm import load_checkpoint
    from .pipeline import load_reference
    from .rvq import load_codebooks
    from .training import require
    from .vocab import syllable_vocab
    from .vocal_stage import generate_vocal, save_vocal_tokens
    model, _ = load_checkpoint(require(run, "vocal"))
    cb = load_codebooks(require(run, "rvq"))
    ref = load_reference(corpus, ref_clip, run)
    vocal = generate_vocal(model, syllable_vocab().encode_text(lyrics),
                           expand(load_json(midi_path)), ref, seed=seed)
    save_vocal_tokens(vocal, cb.content_hash(), out)
    click.echo(f"wrote {vocal.n_steps} vocal frames to {out}")


@main.command("generate-accomp")
@click.option("--run", required=True, type=click.Path(exists=True))
@click.option("--vocal", "vocal_path", required=True, type=click.Path(exists=True))
@click.option("--prompt", default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def generate_accomp_cmd(run, vocal_path, prompt, seed, out):
    """Stage 2: vocal tokens (+ optional prompt) to accompaniment mel."""
    from .diffusion import sample_accompaniment
    from .features import save_mel
    from .rvq import load_codebooks
    from .training import load_ldm, load_vae, require
    from .vocab import build_prompt_vocab
    from .vocal_stage import load_vocal_tokens
    cb = load_codebooks(require(run, "rvq"))
    vocal, codec_hash = load_vocal_tokens(vocal_path)
    if codec_hash != cb.content_hash():
        raise GenerationError("accomp", "vocal tokens come from a different codec")
    model, schedule, blob = load_ldm(run)
    ids = build_prompt_vocab().encode_text(prompt) if prompt else None
    mel = sample_accompaniment(model, load_vae(run), vocal, ids, schedule,
                               seed=seed, guidance=blob["guidance"])
    save_mel(mel, out)
    click.echo(f"wrote {mel.shape[0]} accompaniment mel frames to {out}")


@main.command("sing")
@click.option("--run", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--lyrics", required=True)
@click.option("--ref-clip", required=True)
@click.option("--melody-prompt", default=None)
@click.option("--accomp-prompt", default=None)
@click.option("--midi", "midi_path", default=None, type=click.Path(exists=True),
              help="User MIDI; skips stage 0.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def sing_cmd(run, corpus, lyrics, ref_clip, melody_prompt, accomp_prompt,
             midi_path, seed, out):
    """Full chain: lyrics + reference vocal to a mixed song."""
    from .melody import load_json
    from .pipeline import load_reference, sing
    ref = load_reference(corpus, ref_clip, run)
    override = load_json(midi_path) if midi_path else None
    artifacts = sing(run, out, lyrics, ref, melody_prompt, accomp_prompt,
                     midi_override=override, seed=seed)
    for name, path in artifacts.items():
        click.echo(f"{name}: {path}")


@main.command("remix")
@click.option("--vocal", "vocal_wav", required=True, type=click.Path(exists=True))
@click.option("--accomp", "accomp_wav", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@handle_errors
def remix_cmd(vocal_wav, accomp_wav, out):
    """Mix vocal and accompaniment stems into one waveform."""
    from .features import load_wav, remix, save_wav
    v, sr1 = load_wav(vocal_wav)
    a, sr2 = load_wav(accomp_wav)
    if sr1 != sr2:
        raise ConfigError(f"sample rates differ: {sr1} vs {sr2}")
    save_wav(remix(v, a), out, sr=sr1)
    click.echo(f"wrote {out}")


@main.command("evaluate")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--run", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--rounded", is_flag=True, help="Round durations to the tempo grid for PD/DD.")
@click.option("--limit", default=None, type=int, help="Evaluate at most N holdout clips.")
@click.option("--json-out", default=None, type=click.Path())
@handle_errors
def evaluate_cmd(corpus, run, seed, rounded, limit, json_out):
    """Generate holdout predictions and print the metric table."""
    from .pipeline import evaluate
    report = evaluate(corpus, run, seed=seed, rounded=rounded, limit=limit)
    if json_out:
        Path(json_out).write_text(report.to_json())
    click.echo(report.to_table())


if __name__ == "__main__":
    main()

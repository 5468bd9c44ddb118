"""Accompaniment generation: mel VAE, DDPM processes, hybrid conditioning.

The vocal condition is fused with the noisy latent along the channel axis
through a 2d->d linear map; prompt token embeddings are concatenated along the
time axis, ride through every step un-noised, and are dropped from the
prediction and the loss. Classifier-free guidance mixes the conditional and
prompt-dropped predictions at sampling time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AlignmentError, InvalidInput
from .mslm import FrameTokens, _Stack
from .vocal_stage import N_ACOUSTIC_SLOTS, VOCAL_UPSAMPLE

D_LATENT = 20
MEL_BINS = 80
VAE_RATIO = 2


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise InvalidInput("betas must be a 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInput("betas must lie strictly in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise InvalidInput("alpha_bar must be strictly decreasing")
        if self.alpha_bars[-1] >= 1e-3:
            raise InvalidInput(f"alpha_bar at T must be < 1e-3, got {self.alpha_bars[-1]:.2e}")

    @property
    def t_max(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, t_max: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, t_max))

    @classmethod
    def desk(cls) -> "NoiseSchedule":
        return cls.linear(100, 1e-3, 0.2)

    @classmethod
    def paper(cls) -> "NoiseSchedule":
        return cls.linear(1000, 1e-4, 0.02)


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed form of the forward Markov chain at step t (1-based)."""
    if not (1 <= t <= schedule.t_max):
        raise InvalidInput(f"t={t} out of range [1, {schedule.t_max}]")
    ab = schedule.alpha_bars[t - 1]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


class MelVAE(nn.Module):
    """1-D convolutional VAE; time axis downsampled by 2, latent width 20."""

    def __init__(self, d_latent: int = D_LATENT, hidden: int = 96, n_mels: int = MEL_BINS):
        super().__init__()
        self.d_latent = d_latent
        self.n_mels = n_mels
        self.enc = nn.Sequential(
            nn.Conv1d(n_mels, hidden, 5, stride=2, padding=2),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, 5, padding=2),
            nn.GELU(),
            nn.Conv1d(hidden, 2 * d_latent, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv1d(d_latent, hidden, 3, padding=1),
            nn.GELU(),
            nn.ConvTranspose1d(hidden, hidden, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv1d(hidden, n_mels, 3, padding=1),
        )

    def encode(self, mel: torch.Tensor, sample: bool = True,
               generator: Optional[torch.Generator] = None):
        """mel (T, 80) -> (mu, logvar, z) with z of shape (T//2, d_latent)."""
        if not torch.isfinite(mel).all():
            raise InvalidInput("mel contains non-finite values")
        if mel.shape[0] % 2:
            mel = torch.cat([mel, mel[-1:]])  # pad odd lengths by repetition
        h = self.enc(mel.T.unsqueeze(0)).squeeze(0).T  # (T/2, 2*d_latent)
        mu, logvar = h.chunk(2, dim=-1)
        logvar = logvar.clamp(-12, 8)
        if sample:
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            z = mu + torch.exp(0.5 * logvar) * noise
        else:
            z = mu
        return mu, logvar, z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z.T.unsqueeze(0)).squeeze(0).T

    def loss(self, mel: torch.Tensor, kl_weight: float = 1e-4,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if mel.shape[0] % 2:
            mel = torch.cat([mel, mel[-1:]])
        mu, logvar, z = self.encode(mel, generator=generator)
        recon = self.decode(z)
        rec = F.mse_loss(recon, mel)
        kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).mean()
        return rec + kl_weight * kl


def _time_embedding(t: int, d: int, dtype, device) -> torch.Tensor:
    half = d // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=dtype, device=device) / half)
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


class Denoiser(nn.Module):
    """Feed-forward transformer epsilon-predictor with hybrid conditioning."""

    def __init__(self, codebook_size: int, prompt_vocab: int, d: int = 128,
                 layers: int = 4, heads: int = 4, d_latent: int = D_LATENT,
                 max_len: int = 2048):
        super().__init__()
        self.d = d
        self.d_latent = d_latent
        self.z_proj = nn.Linear(d_latent, d)
        self.vocal_embed = nn.ModuleList(
            nn.Embedding(codebook_size + 3, d) for _ in range(N_ACOUSTIC_SLOTS))
        self.prompt_embed = nn.Embedding(prompt_vocab, d)
        self.fuse = nn.Linear(2 * d, d)  # W: (a + z_t channel concat) -> d
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.pos = nn.Embedding(max_len, d)
        self.stack = _Stack(d, layers, heads, ff_mult=4)
        self.head = nn.Linear(d, d_latent)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def embed_vocal_condition(self, vocal: FrameTokens, n_lat: int) -> torch.Tensor:
        """Acoustic-slot embeddings summed, 1.5x upsampled, resampled to n_lat.

        The F0 slot is excluded from the accompaniment condition.
        """
        tokens = torch.as_tensor(vocal.tokens[:, :N_ACOUSTIC_SLOTS])
        emb = sum(self.vocal_embed[q](tokens[:, q]) for q in range(N_ACOUSTIC_SLOTS))
        n_up = int(np.ceil(vocal.n_steps * VOCAL_UPSAMPLE))
        src = np.minimum((np.arange(n_up) / VOCAL_UPSAMPLE).astype(int), vocal.n_steps - 1)
        up = emb[torch.as_tensor(src)]
        # nearest-neighbor resample from the 75 Hz grid to the latent grid
        idx = np.minimum((np.arange(n_lat) * n_up / max(n_lat, 1)).astype(int), n_up - 1)
        return up[torch.as_tensor(idx)]

    def hybrid_condition(self, z_t: torch.Tensor, a: torch.Tensor,
                         s: Optional[torch.Tensor]) -> torch.Tensor:
        """Channel-wise fusion with the vocal condition, temporal concat of
        prompt embeddings; output length is n + N."""
        if a.shape != (z_t.shape[0], self.d):
            raise AlignmentError(
                f"vocal condition shape {tuple(a.shape)} does not match latent "
                f"({z_t.shape[0]}, {self.d})")
        fused = self.fuse(torch.cat([a, self.z_proj(z_t)], dim=-1))
        if s is None or s.shape[0] == 0:
            return fused
        return torch.cat([s, fused])

    def forward(self, z_t: torch.Tensor, t: int, a: torch.Tensor,
                s: Optional[torch.Tensor]) -> torch.Tensor:
        """Predict epsilon for the latent region; prompt positions are dropped."""
        n_lat = z_t.shape[0]
        x = self.hybrid_condition(z_t, a, s)
        temb = self.time_mlp(_time_embedding(t, self.d, x.dtype, x.device))
        x = x + temb + self.pos(torch.arange(x.shape[0], device=x.device))
        out = self.stack(x.unsqueeze(0), causal=False).squeeze(0)
        return self.head(out[-n_lat:])

    def embed_prompt(self, ids) -> Optional[torch.Tensor]:
        if ids is None:
            return None
        ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
        return self.prompt_embed(ids)


def predict_z0(model: Denoiser, z_t: torch.Tensor, t: int, a: torch.Tensor,
               s: Optional[torch.Tensor], schedule: NoiseSchedule) -> torch.Tensor:
    ab = schedule.alpha_bars[t - 1]
    eps_hat = model(z_t, t, a, s)
    return (z_t - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)


def denoise_step(model: Denoiser, z_t: torch.Tensor, t: int, a: torch.Tensor,
                 s: Optional[torch.Tensor], schedule: NoiseSchedule,
                 guidance: float = 1.0,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One ancestral DDPM update with fixed sigma_t^2 = beta_t and CFG."""
    eps_drop = model(z_t, t, a, None)
    if s is not None and guidance != 0.0:
        eps_cond = model(z_t, t, a, s)
        eps = eps_drop + guidance * (eps_cond - eps_drop)
    else:
        eps = eps_drop
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    mean = (z_t - beta / math.sqrt(1 - ab) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return mean + math.sqrt(beta) * noise


def train_loss(model: Denoiser, z0: torch.Tensor, a: torch.Tensor,
               s: Optional[torch.Tensor], schedule: NoiseSchedule,
               generator: Optional[torch.Generator] = None,
               p_each: float = 0.1, p_joint: float = 0.1,
               drop_vocal: bool = False) -> torch.Tensor:
    """Per-frame squared epsilon error at a uniformly sampled step.

    The prompt is dropped with the shared 0.19 scheme; the loss covers the
    latent region only (prompt positions never reach the head output).
    """
    t = int(torch.randint(1, schedule.t_max + 1, (1,), generator=generator))
    draws = torch.rand(3, generator=generator)
    if draws[0] < p_joint:
        s = None
        if drop_vocal:
            a = torch.zeros_like(a)
    elif draws[1] < p_each:
        s = None
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    eps_hat = model(z_t, t, a, s)
    return ((eps_hat - eps) ** 2).sum(-1).mean()


def latent_length(n_vocal_frames: int) -> int:
    """Mel frames run at 1.5x the token rate; the VAE halves that."""
    return int(np.floor(n_vocal_frames * VOCAL_UPSAMPLE / VAE_RATIO))


@torch.no_grad()
def sample_accompaniment(model: Denoiser, vae: MelVAE, vocal: FrameTokens,
                         prompt_ids, schedule: NoiseSchedule, seed: int = 0,
                         guidance: float = 2.0) -> np.ndarray:
    """Iterate the reverse chain from pure noise and decode through the VAE."""
    n_lat = latent_length(vocal.n_steps)
    if n_lat < 1:
        raise InvalidInput("vocal clip too short for accompaniment generation")
    generator = torch.Generator().manual_seed(seed)
    a = model.embed_vocal_condition(vocal, n_lat)
    s = model.embed_prompt(prompt_ids)
    z = torch.randn((n_lat, model.d_latent), generator=generator)
    for t in range(schedule.t_max, 0, -1):
        z = denoise_step(model, z, t, a, s, schedule, guidance, generator)
    mel = vae.decode(z)
    return mel.numpy()

"""Generic global/local autoregressive framework.

Each timestep carries P parallel discrete tokens. Per-step slot embeddings are
concatenated along the channel axis and projected, a causal global transformer
models the temporal distribution over these step vectors, and a causal local
transformer models the P tokens within a step conditioned on the projected
global context (element-wise summation). Inputs to the global stack are shifted
right by one position so the context at step i depends only on steps < i.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyGeneration, InvalidInput

TOKEN_GRID_KINDS = {"target", "reference_acoustic"}
TEXT_KINDS = {"text_semantic", "melody_prompt", "pinyin", "expanded_midi"}


@dataclass(frozen=True)
class FrameTokens:
    """N x P token grid with one vocabulary per slot."""

    tokens: np.ndarray
    vocab_sizes: tuple[int, ...]

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] != len(self.vocab_sizes):
            raise InvalidInput(f"tokens must be N x {len(self.vocab_sizes)}, got {t.shape}")
        if t.shape[0] < 1:
            raise InvalidInput("need at least one step")
        for tau, v in enumerate(self.vocab_sizes):
            col = t[:, tau]
            if col.min() < 0 or col.max() >= v:
                raise InvalidInput(f"slot {tau} token out of range [0, {v})")
        object.__setattr__(self, "tokens", t)

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[0]

    @property
    def p(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class ConditionSegment:
    """One span of the assembled model input.

    Text-like kinds carry a flat token id array and are embedded by a
    kind-specific encoder, then repeated across the P channel slots. Token-grid
    kinds carry (n, P) slot tokens. Only target segments enter the loss.
    """

    kind: str
    tokens: np.ndarray
    loss_mask: bool = False

    def __post_init__(self):
        if self.kind not in TOKEN_GRID_KINDS | TEXT_KINDS:
            raise InvalidInput(f"unknown segment kind {self.kind!r}")
        if self.loss_mask and self.kind != "target":
            raise InvalidInput("loss_mask is only allowed on target segments")
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ModelConfig:
    vocab_sizes: tuple[int, ...]
    text_vocabs: dict[str, int] = field(default_factory=dict)  # kind -> vocab size
    d_slot: int = 64
    d_global: int = 256
    n_global_layers: int = 4
    n_global_heads: int = 4
    d_local: int = 128
    n_local_layers: int = 2
    n_local_heads: int = 4
    text_encoder_layers: int = 2
    max_steps: int = 2048
    ff_mult: int = 4

    @property
    def p(self) -> int:
        return len(self.vocab_sizes)


class _Block(nn.Module):
    """Pre-LN transformer block with causal self-attention."""

    def __init__(self, d: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, x, attn_mask):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + a
        return x + self.ff(self.ln2(x))


def _causal_mask(n: int, device, dtype) -> torch.Tensor:
    mask = torch.full((n, n), float("-inf"), device=device, dtype=dtype)
    return torch.triu(mask, diagonal=1)


class _Stack(nn.Module):
    def __init__(self, d: int, layers: int, heads: int, ff_mult: int):
        super().__init__()
        self.blocks = nn.ModuleList(_Block(d, heads, ff_mult) for _ in range(layers))
        self.ln_out = nn.LayerNorm(d)

    def forward(self, x, causal: bool = True):
        mask = _causal_mask(x.shape[-2], x.device, x.dtype) if causal else None
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_out(x)


class TextEncoder(nn.Module):
    """Embedding plus an optional small contextual transformer."""

    def __init__(self, vocab: int, d_out: int, layers: int, heads: int = 4, ff_mult: int = 4):
        super().__init__()
        self.embed = nn.Embedding(vocab, d_out)
        self.pos = nn.Embedding(512, d_out)
        self.stack = _Stack(d_out, layers, heads, ff_mult) if layers > 0 else None

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) + self.pos(torch.arange(len(ids), device=ids.device))
        if self.stack is not None:
            x = self.stack(x.unsqueeze(0), causal=False).squeeze(0)
        return x


@dataclass
class Sampler:
    top_k: int = 32
    temperature: float = 0.9
    greedy: bool = False

    def pick(self, logits: torch.Tensor, generator: Optional[torch.Generator]) -> int:
        if self.greedy or self.temperature <= 0:
            return int(logits.argmax())
        logits = logits / self.temperature
        if self.top_k and self.top_k < logits.shape[-1]:
            kth = torch.topk(logits, self.top_k).values[-1]
            logits = logits.masked_fill(logits < kth, float("-inf"))
        probs = F.softmax(logits, dim=-1)
        return int(torch.multinomial(probs, 1, generator=generator))


# hook(slot_idx, step_idx, prev_slot_tokens, step_prefix, logits) -> logits
LogitsHook = Callable[[int, int, list[int], list[int], torch.Tensor], torch.Tensor]


class StopStep(Exception):
    """Raised by a logits hook when no admissible token remains; generation
    ends before the current step, which is discarded."""


class GlobalLocalModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        p, ds = config.p, config.d_slot
        self.slot_embed = nn.ModuleList(nn.Embedding(v, ds) for v in config.vocab_sizes)
        self.concat_proj = nn.Linear(p * ds, config.d_global)
        self.text_encoders = nn.ModuleDict({
            kind: TextEncoder(vocab, ds, config.text_encoder_layers if kind == "text_semantic" else 0)
            for kind, vocab in config.text_vocabs.items()
        })
        self.start_h = nn.Parameter(torch.zeros(config.d_global))
        self.global_pos = nn.Embedding(config.max_steps, config.d_global)
        self.global_stack = _Stack(config.d_global, config.n_global_layers,
                                   config.n_global_heads, config.ff_mult)
        self.ctx_proj = nn.Linear(config.d_global, config.d_local)
        self.local_embed = nn.ModuleList(nn.Embedding(v, config.d_local) for v in config.vocab_sizes)
        self.local_begin = nn.Parameter(torch.zeros(config.d_local))
        self.local_pos = nn.Embedding(p, config.d_local)
        self.local_stack = nn.ModuleList(
            _Block(config.d_local, config.n_local_heads, config.ff_mult)
            for _ in range(config.n_local_layers)
        )
        self.local_ln = nn.LayerNorm(config.d_local)
        self.heads = nn.ModuleList(nn.Linear(config.d_local, v) for v in config.vocab_sizes)
        # near-uniform initial predictive distribution
        for head in self.heads:
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    # ---- embedding -------------------------------------------------------

    def embed_step_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """(.., P) slot tokens -> (.., d_global) channel-concat step vectors."""
        parts = [self.slot_embed[tau](tokens[..., tau]) for tau in range(self.config.p)]
        return self.concat_proj(torch.cat(parts, dim=-1))

    def embed_text(self, kind: str, ids: torch.Tensor) -> torch.Tensor:
        """Text tokens repeat across the P slots before the concat projection."""
        if kind not in self.text_encoders:
            raise InvalidInput(f"model has no encoder for segment kind {kind!r}")
        e = self.text_encoders[kind](ids)  # (n, d_slot)
        return self.concat_proj(e.repeat(1, self.config.p))

    def assemble(self, segments: Sequence[ConditionSegment]):
        """Concatenate segments into (h, loss_mask, labels).

        labels is (N, P) with -1 outside target steps.
        """
        device = self.start_h.device
        hs, masks, labels = [], [], []
        for seg in segments:
            ids = torch.as_tensor(seg.tokens, device=device)
            if seg.kind in TOKEN_GRID_KINDS:
                hs.append(self.embed_step_tokens(ids))
                if seg.loss_mask:
                    labels.append(ids)
                else:
                    labels.append(torch.full_like(ids, -1))
                masks.append(torch.full((seg.n_steps,), seg.loss_mask, dtype=torch.bool, device=device))
            else:
                hs.append(self.embed_text(seg.kind, ids))
                labels.append(torch.full((seg.n_steps, self.config.p), -1, dtype=torch.long, device=device))
                masks.append(torch.zeros(seg.n_steps, dtype=torch.bool, device=device))
        h = torch.cat(hs)
        if h.shape[0] > self.config.max_steps:
            raise InvalidInput(f"assembled length {h.shape[0]} exceeds max_steps {self.config.max_steps}")
        return h, torch.cat(masks), torch.cat(labels)

    # ---- forward passes --------------------------------------------------

    def global_forward(self, h: torch.Tensor) -> torch.Tensor:
        """Causal context over shifted inputs: o_i depends on h_{<i} only."""
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
        b, n, _ = h.shape
        start = self.start_h.expand(b, 1, -1)
        x = torch.cat([start, h[:, :-1]], dim=1)
        x = x + self.global_pos(torch.arange(n, device=h.device))
        o = self.global_stack(x, causal=True)
        return o.squeeze(0) if squeeze else o

    def local_logits(self, step_tokens: torch.Tensor, ctx: torch.Tensor) -> list[torch.Tensor]:
        """Within-step logits for every slot, batched over M steps.

        step_tokens is (M, P); slot tau's logits only see tokens < tau.
        """
        m, p = step_tokens.shape
        ctx_l = self.ctx_proj(ctx)
        rows = [self.local_begin.expand(m, -1)]
        for tau in range(p - 1):
            rows.append(self.local_embed[tau](step_tokens[:, tau]))
        x = torch.stack(rows, dim=1)
        x = x + ctx_l.unsqueeze(1) + self.local_pos(torch.arange(p, device=x.device))
        mask = _causal_mask(p, x.device, x.dtype)
        for block in self.local_stack:
            x = block(x, mask)
        x = self.local_ln(x)
        return [self.heads[tau](x[:, tau]) for tau in range(p)]

    def local_logits_slot(self, prefix: list[int], ctx: torch.Tensor, tau: int) -> torch.Tensor:
        """Logits for slot tau given the within-step prefix x^{<tau}."""
        if not (0 <= tau < self.config.p):
            raise InvalidInput(f"slot {tau} out of range")
        rows = [self.local_begin]
        for j, tok in enumerate(prefix[:tau]):
            rows.append(self.local_embed[j](torch.tensor(tok, device=ctx.device)))
        x = torch.stack(rows).unsqueeze(0)
        pos = self.local_pos(torch.arange(tau + 1, device=ctx.device))
        x = x + self.ctx_proj(ctx).reshape(1, 1, -1) + pos
        mask = _causal_mask(tau + 1, x.device, x.dtype)
        for block in self.local_stack:
            x = block(x, mask)
        return self.heads[tau](self.local_ln(x)[0, tau])

    def nll_loss(self, segments: Sequence[ConditionSegment]) -> torch.Tensor:
        """Mean NLL over (step, slot) pairs where the loss mask is set."""
        h, mask, labels = self.assemble(segments)
        if not bool(mask.any()):
            raise InvalidInput("no target steps in the loss mask")
        o = self.global_forward(h)
        step_tokens = labels[mask]
        logits = self.local_logits(step_tokens, o[mask])
        losses = [
            F.cross_entropy(logits[tau], step_tokens[:, tau], reduction="sum")
            for tau in range(self.config.p)
        ]
        return sum(losses) / (step_tokens.shape[0] * self.config.p)

    @torch.no_grad()
    def generate(
        self,
        condition: Sequence[ConditionSegment],
        max_steps: int,
        sampler: Optional[Sampler] = None,
        eos_token: Optional[int] = None,
        forced_len: Optional[int] = None,
        logits_hook: Optional[LogitsHook] = None,
        generator: Optional[torch.Generator] = None,
    ) -> tuple[FrameTokens, bool]:
        """Alternate the two transformers: one global context per new step,
        then P local samples appended.

        Stops when slot 0 emits eos_token, or exactly after forced_len steps
        when length forcing is on. Returns (tokens, truncated_flag); the EOS
        step itself is not included in the output.
        """
        sampler = sampler or Sampler()
        h, _, _ = self.assemble(condition)
        steps: list[list[int]] = []
        limit = forced_len if forced_len is not None else max_steps
        truncated = False
        for i in range(limit):
            padded = torch.cat([h, torch.zeros(1, h.shape[1], device=h.device, dtype=h.dtype)])
            o_i = self.global_forward(padded)[-1]
            step: list[int] = []
            hit_eos = False
            try:
                for tau in range(self.config.p):
                    logits = self.local_logits_slot(step, o_i, tau)
                    if forced_len is not None and eos_token is not None:
                        logits = logits.clone()
                        logits[eos_token] = float("-inf")
                    if logits_hook is not None:
                        logits = logits_hook(tau, len(steps), [s[tau] for s in steps], step, logits)
                    tok = sampler.pick(logits, generator)
                    if tau == 0 and eos_token is not None and forced_len is None and tok == eos_token:
                        hit_eos = True
                        break
                    step.append(tok)
            except StopStep:
                # the hook found no admissible continuation; drop the partial
                # step and end the sequence here
                truncated = True
                break
            if hit_eos:
                break
            steps.append(step)
            new_h = self.embed_step_tokens(torch.tensor([step], device=h.device))
            h = torch.cat([h, new_h])
        else:
            truncated = forced_len is None
        if not steps:
            raise EmptyGeneration("model emitted the end token before any step")
        return FrameTokens(np.array(steps, dtype=np.int64), self.config.vocab_sizes), truncated


def save_checkpoint(model: GlobalLocalModel, path, extra: Optional[dict] = None) -> None:
    torch.save(
        {"config": asdict(model.config), "state_dict": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_checkpoint(path) -> tuple[GlobalLocalModel, dict]:
    blob = torch.load(path, weights_only=False)
    cfg = blob["config"]
    cfg["vocab_sizes"] = tuple(cfg["vocab_sizes"])
    model = GlobalLocalModel(ModelConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})

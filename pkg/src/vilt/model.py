"""Single-stream pre-norm transformer over concatenated text and patch embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .image import ImageBatch, interpolate_pos_grid
from .text import TokenBatch


@dataclass
class ModelConfig:
    hidden: int = 768
    depth: int = 12
    heads: int = 12
    mlp: int = 3072
    patch_size: int = 32
    channels: int = 3
    vocab_size: int = 30522
    max_text_len: int = 40
    max_patches: int = 200
    pos_grid: tuple[int, int] = (12, 12)
    ln_eps: float = 1e-6
    dropout: float = 0.0
    final_ln: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        self.pos_grid = tuple(self.pos_grid)
        for name in ("hidden", "depth", "heads", "mlp", "patch_size", "channels",
                     "vocab_size", "max_text_len", "max_patches"):
            if getattr(self, name) < 1 and not (name == "depth" and self.depth == 0):
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if min(self.pos_grid) < 1:
            raise ValueError("pos_grid dimensions must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_grid"] = list(self.pos_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        """ViLT-B/32 dimensions with a bert-base-uncased sized vocabulary."""
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        kw = dict(hidden=8, depth=2, heads=2, mlp=16, patch_size=4, vocab_size=32,
                  max_text_len=8, max_patches=16, pos_grid=(2, 2))
        kw.update(overrides)
        return cls(**kw)


@dataclass
class SequenceState:
    z: torch.Tensor  # [B, S, H]
    modality_split: int
    attn_mask: torch.Tensor  # [B, S] bool

    @property
    def text(self) -> torch.Tensor:
        return self.z[:, : self.modality_split]

    @property
    def visual(self) -> torch.Tensor:
        return self.z[:, self.modality_split:]


def trunc_normal(shape, std=0.02, generator=None) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)


class Affine(nn.Module):
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, generator=None, std: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal((d_in, d_out), std, generator))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return x @ self.weight + self.bias


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        h = cfg.hidden
        self.heads = cfg.heads
        self.dropout = cfg.dropout
        self.ln1 = LayerNorm(h, cfg.ln_eps)
        std = cfg.init_std
        self.q = Affine(h, h, generator, std)
        self.k = Affine(h, h, generator, std)
        self.v = Affine(h, h, generator, std)
        self.o = Affine(h, h, generator, std)
        self.ln2 = LayerNorm(h, cfg.ln_eps)
        self.fc1 = Affine(h, cfg.mlp, generator, std)
        self.fc2 = Affine(cfg.mlp, h, generator, std)

    def attention(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, s, h = x.shape
        d = h // self.heads
        q = self.q(x).view(b, s, self.heads, d).transpose(1, 2)
        k = self.k(x).view(b, s, self.heads, d).transpose(1, 2)
        v = self.v(x).view(b, s, self.heads, d).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        attn = F.dropout(attn, self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(b, s, h)
        return self.o(out)

    def forward(self, z: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        z = z + F.dropout(self.attention(self.ln1(z), key_mask), self.dropout, self.training)
        y = self.fc2(F.gelu(self.fc1(self.ln2(z))))
        return z + F.dropout(y, self.dropout, self.training)


class ViLT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        g = None if seed is None else torch.Generator().manual_seed(seed)
        h = cfg.hidden
        std = cfg.init_std

        def param(*shape):
            return nn.Parameter(trunc_normal(shape, std, g))

        # text embedder
        self.word_embed = param(cfg.vocab_size, h)
        self.text_pos = param(cfg.max_text_len + 1, h)
        self.text_cls = param(h)
        # visual embedder
        self.patch_proj = Affine(cfg.patch_dim, h, g, std)
        self.vis_pos_grid = param(*cfg.pos_grid, h)
        self.vis_pos_cls = param(h)
        self.vis_cls = param(h)
        # modal types
        self.text_type = param(h)
        self.vis_type = param(h)
        self.blocks = nn.ModuleList(EncoderBlock(cfg, g) for _ in range(cfg.depth))
        self.final_ln = LayerNorm(h, cfg.ln_eps)
        self.pooler = Affine(h, h, g, std)

    def embed_text(self, tokens: TokenBatch) -> torch.Tensor:
        ids = tokens.ids
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise IndexError("token id outside the vocabulary")
        length = ids.shape[1]
        if length > self.cfg.max_text_len + 1:
            raise ValueError(f"text length {length - 1} exceeds max_text_len {self.cfg.max_text_len}")
        # column 0 holds [CLS]; its embedding is the learned class vector
        words = self.word_embed[ids[:, 1:]]
        cls = self.text_cls.expand(ids.shape[0], 1, -1)
        return torch.cat([cls, words], dim=1) + self.text_pos[:length]

    def embed_image(self, images: ImageBatch) -> torch.Tensor:
        x = images.patches
        if x.shape[-1] != self.cfg.patch_dim:
            raise ValueError(f"patch vectors have length {x.shape[-1]}, expected {self.cfg.patch_dim}")
        b = x.shape[0]
        proj = self.patch_proj(x)
        pos = torch.zeros_like(proj)
        grids = {}
        for i, shape in enumerate(images.grid_shapes):
            if shape not in grids:
                grids[shape] = interpolate_pos_grid(self.vis_pos_grid, shape)
            gp = images.grid_pos[i]
            pos[i] = grids[shape][gp[:, 0], gp[:, 1]]
        cls = (self.vis_cls + self.vis_pos_cls).expand(b, 1, -1)
        return torch.cat([cls, proj + pos], dim=1)

    def fuse(self, t_emb, v_emb, text_mask, patch_mask) -> SequenceState:
        if t_emb.shape[0] != v_emb.shape[0] or t_emb.shape[2] != v_emb.shape[2]:
            raise ValueError("text and image embeddings disagree on batch or hidden size")
        z = torch.cat([t_emb + self.text_type, v_emb + self.vis_type], dim=1)
        ones = torch.ones_like(patch_mask[:, :1])
        mask = torch.cat([text_mask, ones, patch_mask], dim=1)
        return SequenceState(z, t_emb.shape[1], mask)

    def encode(self, state: SequenceState) -> SequenceState:
        z = state.z
        for i, block in enumerate(self.blocks):
            z = block(z, state.attn_mask)
            if not torch.isfinite(z).all():
                raise FloatingPointError(f"non-finite activations after encoder layer {i}")
        if self.cfg.final_ln:
            z = self.final_ln(z)
        return SequenceState(z, state.modality_split, state.attn_mask)

    def pool(self, state: SequenceState) -> torch.Tensor:
        return torch.tanh(self.pooler(state.z[:, 0]))

    def forward(self, tokens: TokenBatch, images: ImageBatch):
        t = self.embed_text(tokens)
        v = self.embed_image(images)
        t = F.dropout(t, self.cfg.dropout, self.training)
        v = F.dropout(v, self.cfg.dropout, self.training)
        state = self.encode(self.fuse(t, v, tokens.attn_mask, images.mask))
        return state, self.pool(state)


def named_parameters_dict(*modules: nn.Module, prefixes=None) -> dict[str, torch.Tensor]:
    out = {}
    for i, m in enumerate(modules):
        prefix = "" if prefixes is None else prefixes[i]
        for name, p in m.named_parameters():
            out[prefix + name] = p
    return out

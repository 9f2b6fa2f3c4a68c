"""Pre-training heads and losses: ITM (+WPA), MLM and MPP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .image import ImageBatch
from .model import Affine, LayerNorm, ModelConfig, SequenceState, ViLT
from .ot import wpa_loss
from .text import IGNORE_INDEX, TokenBatch

WPA_WEIGHT = 0.1


class PretrainHeads(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 1):
        super().__init__()
        g = None if seed is None else torch.Generator().manual_seed(seed)
        h = cfg.hidden
        self.itm = Affine(h, 2, g)
        self.mlm_dense = Affine(h, h, g)
        self.mlm_ln = LayerNorm(h, cfg.ln_eps)
        self.mlm_decoder = Affine(h, cfg.vocab_size, g)
        self.mpp = Affine(h, 3, g)

    def mlm(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlm_decoder(self.mlm_ln(F.gelu(self.mlm_dense(x))))


@dataclass
class PretrainBatch:
    tokens: TokenBatch
    images: ImageBatch
    itm_label: torch.Tensor  # [B] bool
    mpp_labels: torch.Tensor | None = None  # [B, N, 3], -1 where unmasked
    mpp_mask: torch.Tensor | None = None  # [B, N] bool


def build_itm_pairs(image_of_caption, n_images: int, rng: np.random.Generator, p_keep: float = 0.5):
    """Keep each caption's image with probability ``p_keep``; otherwise draw a different image.

    Returns ``(image_index, itm_label)`` arrays.
    """
    if n_images < 2:
        raise ValueError("ITM negatives need at least two distinct images")
    src = np.asarray(image_of_caption)
    keep = rng.random(len(src)) < p_keep
    # offset in [1, n) guarantees a different image
    other = (src + rng.integers(1, n_images, size=len(src))) % n_images
    return np.where(keep, src, other), keep


def mask_patches(images: ImageBatch, rng: np.random.Generator, p_mask: float = 0.15, channels: int = 3):
    """Zero out patches with probability ``p_mask`` and return their mean-RGB targets."""
    valid = images.mask.numpy()
    chosen = (rng.random(valid.shape) < p_mask) & valid
    mask = torch.from_numpy(chosen)
    b, n, d = images.patches.shape
    means = images.patches.reshape(b, n, channels, -1).mean(-1)
    labels = torch.where(mask[..., None], means, torch.full_like(means, -1.0))
    patches = images.patches.masked_fill(mask[..., None], 0.0)
    return ImageBatch(patches, images.grid_pos, images.mask, images.grid_shapes), labels, mask


def itm_loss(pooled: torch.Tensor, heads: PretrainHeads, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(heads.itm(pooled), labels.long())


def mlm_loss(z_text: torch.Tensor, heads: PretrainHeads, labels: torch.Tensor) -> torch.Tensor:
    sel = labels != IGNORE_INDEX
    if not sel.any():
        return z_text.new_zeros(())
    logits = heads.mlm(z_text[sel])
    return F.cross_entropy(logits, labels[sel])


def mpp_loss(z_vis: torch.Tensor, heads: PretrainHeads, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and true mean RGB, over masked patches only.

    ``z_vis`` excludes the visual class slot, so row ``j`` matches patch ``j``.
    """
    if not mask.any():
        return z_vis.new_zeros(())
    pred = heads.mpp(z_vis[mask])
    return ((pred - labels[mask].to(pred.dtype)) ** 2).mean()


def pretrain_loss(
    batch: PretrainBatch,
    model: ViLT,
    heads: PretrainHeads,
    use_wpa: bool = True,
    use_mpp: bool = False,
    plans: dict | None = None,
    wpa_iters: int = 50,
):
    """Total pre-training loss and a per-term report.

    ``wpa`` in the report is already multiplied by its 0.1 weight so the terms
    sum to ``total``. Returns ``(total, report, plans)``.
    """
    state, pooled = model(batch.tokens, batch.images)
    terms = {"itm": itm_loss(pooled, heads, batch.itm_label)}
    used_plans = {}
    if use_wpa:
        terms["wpa"], used_plans = wpa_loss(
            state, batch.tokens.attn_mask, batch.images.mask, batch.itm_label,
            weight=WPA_WEIGHT, iters=wpa_iters, plans=plans,
        )
    terms["mlm"] = mlm_loss(state.text, heads, batch.tokens.mlm_labels)
    if use_mpp:
        if batch.mpp_mask is None:
            raise ValueError("MPP enabled but batch has no masked patches")
        terms["mpp"] = mpp_loss(state.visual[:, 1:], heads, batch.mpp_labels, batch.mpp_mask)
    total = sum(terms.values())
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["total"] = float(total.detach())
    return total, report, used_plans


def itm_accuracy(pooled: torch.Tensor, heads: PretrainHeads, labels: torch.Tensor) -> float:
    pred = heads.itm(pooled).argmax(-1)
    return float((pred == labels.long()).float().mean())

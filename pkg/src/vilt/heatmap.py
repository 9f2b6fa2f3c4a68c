"""Word-to-patch transport heatmaps for a single image-caption pair."""

from __future__ import annotations

import numpy as np
import torch

from .image import ImageBatch
from .model import ViLT
from .ot import TransportPlan, ipot, text_visual_subsets, wpa_cost
from .text import TokenBatch, Vocabulary, basic_split, wordpiece


def word_position(caption: str, word: str, vocab: Vocabulary, max_len: int) -> int:
    """Token position (column in the id row) of the first piece of ``word``'s first occurrence."""
    pos = 1
    target = word.lower()
    for w in basic_split(caption):
        if pos >= max_len:
            break
        if w == target:
            return pos
        pos += len(wordpiece(w, vocab))
    raise KeyError(f"token {word!r} does not occur in caption {caption!r}")


@torch.no_grad()
def alignment_plan(model: ViLT, tokens: TokenBatch, images: ImageBatch, iters: int = 1000,
                   beta: float = 0.5) -> TransportPlan:
    """IPOT plan between the contextual word and patch features of sample 0."""
    model.eval()
    state, _ = model(tokens, images)
    zt, zv = text_visual_subsets(state, tokens.attn_mask, images.mask, 0)
    return ipot(wpa_cost(zt.double(), zv.double()), beta=beta, iters=iters)


def cell_mass_fraction(row: np.ndarray, grid_pos: np.ndarray, cell_mask: np.ndarray) -> float:
    """Share of a plan row's mass that lands on patches inside ``cell_mask``."""
    row = np.asarray(row, dtype=np.float64)
    gp = np.asarray(grid_pos)
    inside = cell_mask[gp[:, 0], gp[:, 1]]
    return float(row[inside].sum() / row.sum())

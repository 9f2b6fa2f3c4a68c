"""Fine-tuning heads and evaluation: classification, NLVR2 pair method, retrieval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .image import ImageBatch
from .model import Affine, LayerNorm, ViLT
from .objectives import PretrainHeads
from .text import TokenBatch


class ClassifierHead(nn.Module):
    """Affine -> LN -> GELU -> affine. Hidden width defaults to twice the input width."""

    def __init__(self, d_in: int, n_classes: int, hidden: int | None = None, eps: float = 1e-6, seed: int | None = 2):
        super().__init__()
        g = None if seed is None else torch.Generator().manual_seed(seed)
        hidden = 2 * d_in if hidden is None else hidden
        self.fc1 = Affine(d_in, hidden, g)
        self.ln = LayerNorm(hidden, eps)
        self.fc2 = Affine(hidden, n_classes, g)

    def forward(self, x):
        return self.fc2(F.gelu(self.ln(self.fc1(x))))


class SimilarityHead(nn.Module):
    """Scalar image-text score, initialised from the true-pair row of an ITM head."""

    def __init__(self, hidden: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(hidden))
        self.bias = nn.Parameter(torch.zeros(()))

    @classmethod
    def from_itm(cls, heads: PretrainHeads) -> "SimilarityHead":
        head = cls(heads.itm.weight.shape[0])
        with torch.no_grad():
            head.weight.copy_(heads.itm.weight[:, 1])
            head.bias.copy_(heads.itm.bias[1])
        return head

    def forward(self, pooled):
        return pooled @ self.weight + self.bias


def vqa_forward(model: ViLT, tokens: TokenBatch, images: ImageBatch, head: ClassifierHead) -> torch.Tensor:
    _, pooled = model(tokens, images)
    return head(pooled)


def nlvr2_forward(model: ViLT, tokens: TokenBatch, image1: ImageBatch, image2: ImageBatch,
                  head: ClassifierHead) -> torch.Tensor:
    """Pair method: run (text, image1) and (text, image2) separately, classify the concatenated poolings."""
    _, p1 = model(tokens, image1)
    _, p2 = model(tokens, image2)
    return head(torch.cat([p1, p2], dim=-1))


def repeat_images(images: ImageBatch, n: int) -> ImageBatch:
    return images.index_select([0] * n)


def retrieval_scores(model: ViLT, sim: SimilarityHead, tokens: TokenBatch, images: ImageBatch) -> torch.Tensor:
    _, pooled = model(tokens, images)
    return sim(pooled)


def retrieval_finetune_step(
    model: ViLT,
    sim: SimilarityHead,
    image: ImageBatch,
    texts: TokenBatch,
    positive: int,
    n_neg: int = 15,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Cross entropy of the positive caption against ``n_neg`` random corpus captions.

    ``image`` holds a single image; ``texts`` is the caption corpus and
    ``positive`` the index of the matching caption in it.
    """
    n_texts = texts.batch_size
    if n_texts - 1 < n_neg:
        raise ValueError(f"need {n_neg} negatives but corpus has {n_texts - 1} other captions")
    rng = np.random.default_rng() if rng is None else rng
    others = np.delete(np.arange(n_texts), positive)
    negs = rng.choice(others, size=n_neg, replace=False) if n_neg else np.empty(0, dtype=int)
    cand = texts.index_select(np.concatenate([[positive], negs]))
    scores = retrieval_scores(model, sim, cand, repeat_images(image, 1 + n_neg))
    return F.cross_entropy(scores[None], torch.zeros(1, dtype=torch.long))


@dataclass
class RetrievalIndex:
    scores: np.ndarray  # [Q, K]
    ground_truth: np.ndarray  # [Q] candidate index of each query's match


def gt_rank(scores: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """0-based rank of each ground truth; equal scores rank by candidate order."""
    scores = np.asarray(scores)
    gt = np.asarray(gt)
    s_gt = scores[np.arange(len(gt)), gt][:, None]
    cand = np.arange(scores.shape[1])[None, :]
    better = (scores > s_gt) | ((scores == s_gt) & (cand < gt[:, None]))
    return better.sum(axis=1)


def recall_at_k(index: RetrievalIndex, k: int) -> float:
    return float((gt_rank(index.scores, index.ground_truth) < k).mean())


@torch.no_grad()
def score_grid(model: ViLT, sim: SimilarityHead, tokens: TokenBatch, images: ImageBatch,
               chunk: int = 256) -> np.ndarray:
    """Scores ``[n_texts, n_images]`` for every caption-image combination."""
    nt, ni = tokens.batch_size, images.batch_size
    ti, ii = np.meshgrid(np.arange(nt), np.arange(ni), indexing="ij")
    ti, ii = ti.ravel(), ii.ravel()
    out = np.empty(nt * ni)
    for s in range(0, len(ti), chunk):
        sl = slice(s, s + chunk)
        out[sl] = retrieval_scores(model, sim, tokens.index_select(ti[sl]), images.index_select(ii[sl])).double().numpy()
    return out.reshape(nt, ni)


def retrieval_metrics(grid: np.ndarray, ks=(1, 5, 10)) -> dict[str, float]:
    """Image retrieval (caption query) and text retrieval (image query) recalls.

    Assumes caption ``i`` belongs to image ``i``.
    """
    gt = np.arange(grid.shape[0])
    ir = RetrievalIndex(grid, gt)
    tr = RetrievalIndex(grid.T, gt)
    metrics = {}
    for k in ks:
        metrics[f"ir_r{k}"] = recall_at_k(ir, k)
        metrics[f"tr_r{k}"] = recall_at_k(tr, k)
    return metrics

"""Word-patch alignment via the inexact proximal point method for optimal transport."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass
class TransportPlan:
    plan: torch.Tensor  # [n, m]
    a: torch.Tensor  # [n]
    b: torch.Tensor  # [m]
    cost: float
    iters: int
    beta: float
    col_err: list[float] = field(default_factory=list)
    row_err: list[float] = field(default_factory=list)

    def entropy(self) -> float:
        p = self.plan[self.plan > 0]
        return float(-(p * p.log()).sum())

    def to_json(self) -> dict:
        return {
            "plan": self.plan.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "cost": self.cost,
            "iters": self.iters,
            "beta": self.beta,
        }


def wpa_cost(z_text: torch.Tensor, z_vis: torch.Tensor) -> torch.Tensor:
    """Cosine distance ``1 - cos(t_i, v_j)``; a zero vector has cosine 0 with everything."""
    if z_text.shape[0] < 1 or z_vis.shape[0] < 1:
        raise ValueError("cost matrix needs at least one row and one column")
    t = F.normalize(z_text, dim=-1, eps=1e-12)
    v = F.normalize(z_vis, dim=-1, eps=1e-12)
    return 1.0 - t @ v.transpose(-1, -2)


@torch.no_grad()
def ipot(
    cost: torch.Tensor,
    a: torch.Tensor | None = None,
    b: torch.Tensor | None = None,
    beta: float = 0.5,
    iters: int = 50,
    inner: int = 1,
    track: bool = False,
) -> TransportPlan:
    """Solve ``min <T, C>`` over couplings of ``a`` and ``b`` with IPOT.

    Parameters
    ----------
    cost : (n, m) tensor
    a, b : marginals, strictly positive and summing to one. Uniform if omitted.
    beta : proximal step size.
    iters : number of proximal (outer) iterations.
    inner : Sinkhorn sweeps per proximal step.
    track : record marginal violations after every outer iteration.
    """
    c = cost.detach()
    n, m = c.shape
    if a is None:
        a = torch.full((n,), 1.0 / n, dtype=c.dtype)
    if b is None:
        b = torch.full((m,), 1.0 / m, dtype=c.dtype)
    a = a.to(c.dtype)
    b = b.to(c.dtype)
    if (a <= 0).any() or (b <= 0).any():
        raise ValueError("marginals must be strictly positive")
    if beta <= 0:
        raise ValueError("beta must be positive")
    # shifting by min(c) rescales G by a constant, which the scalings absorb
    G = torch.exp(-(c - c.min()) / beta)
    T = torch.full_like(c, 1.0 / (n * m))
    sigma = torch.full((m,), 1.0 / m, dtype=c.dtype)
    col_err, row_err = [], []
    for _ in range(iters):
        Q = G * T
        for _ in range(inner):
            delta = a / (Q @ sigma)
            sigma = b / (Q.T @ delta)
        T = delta[:, None] * Q * sigma[None, :]
        if track:
            col_err.append(float((T.sum(0) - b).abs().max()))
            row_err.append(float((T.sum(1) - a).abs().sum()))
    return TransportPlan(T, a, b, float((T * c).sum()), iters, beta, col_err, row_err)


def text_visual_subsets(state, text_mask: torch.Tensor, patch_mask: torch.Tensor, i: int):
    """Contextual features of real word tokens and real patches of sample ``i`` (class slots excluded)."""
    split = state.modality_split
    t_idx = torch.nonzero(text_mask[i, 1:], as_tuple=True)[0] + 1
    v_idx = torch.nonzero(patch_mask[i], as_tuple=True)[0] + split + 1
    return state.z[i, t_idx], state.z[i, v_idx]


def wpa_loss(
    state,
    text_mask: torch.Tensor,
    patch_mask: torch.Tensor,
    positive: torch.Tensor | None = None,
    weight: float = 0.1,
    beta: float = 0.5,
    iters: int = 50,
    plans: dict[int, torch.Tensor] | None = None,
):
    """Weighted approximate Wasserstein distance averaged over positive pairs.

    The transport plans are constants with respect to the gradient. Pass ``plans``
    (sample index -> plan) to reuse previously solved plans instead of re-solving.
    Returns ``(loss, plans)``.
    """
    b = state.z.shape[0]
    if positive is None:
        positive = torch.ones(b, dtype=torch.bool)
    idx = torch.nonzero(positive, as_tuple=True)[0].tolist()
    used = {}
    if weight == 0 or not idx:
        return state.z.new_zeros(()), used
    total = state.z.new_zeros(())
    count = 0
    for i in idx:
        zt, zv = text_visual_subsets(state, text_mask, patch_mask, i)
        if zt.shape[0] == 0 or zv.shape[0] == 0:
            logger.warning("sample %d has an empty text or visual subset; WPA term is 0", i)
            count += 1
            continue
        c = wpa_cost(zt, zv)
        if plans is not None and i in plans:
            T = plans[i].to(c.dtype)
        else:
            T = ipot(c, beta=beta, iters=iters).plan
        used[i] = T
        total = total + (T * c).sum()
        count += 1
    return weight * total / count, used


def heatmap_values(
    plan: TransportPlan | torch.Tensor,
    token_index: int,
    grid: tuple[int, int],
    grid_pos,
    lo: float = 1.0,
    hi: float = 3.0,
) -> np.ndarray:
    """Z-normalised, clamped plan row of one text token, scattered onto the patch grid."""
    p = plan.plan if isinstance(plan, TransportPlan) else plan
    p = np.asarray(p.detach().cpu().numpy() if torch.is_tensor(p) else p, dtype=np.float64)
    if not 0 <= token_index < p.shape[0]:
        raise IndexError(f"token index {token_index} out of range for {p.shape[0]} tokens")
    row = p[token_index]
    std = row.std()
    z = (row - row.mean()) / std if std > 0 else np.zeros_like(row)
    z = np.clip(z, lo, hi)
    out = np.full(grid, lo)
    gp = np.asarray(grid_pos)
    out[gp[:, 0], gp[:, 1]] = z
    return out


def export_heatmap(
    plan: TransportPlan,
    token_index: int,
    grid: tuple[int, int],
    grid_pos,
    out_path: str | Path | None = None,
    image: np.ndarray | None = None,
    patch_size: int = 32,
    color=(1.0, 0.2, 0.6),
) -> np.ndarray:
    """Write a PNG overlay (opacity ~ clamped z-score) and a JSON dump of the plan."""
    values = heatmap_values(plan, token_index, grid, grid_pos)
    if out_path is not None:
        from .image import save_image

        out_path = Path(out_path)
        gh, gw = grid
        alpha = (values - 1.0) / 2.0
        alpha = np.kron(alpha, np.ones((patch_size, patch_size)))
        if image is None:
            base = np.ones((3, gh * patch_size, gw * patch_size))
        else:
            base = np.zeros((3, gh * patch_size, gw * patch_size))
            base[:, : image.shape[1], : image.shape[2]] = image
        tint = np.asarray(color, dtype=np.float64)[:, None, None]
        overlay = (1.0 - 0.7 * alpha) * base + 0.7 * alpha * tint
        save_image(overlay, out_path)
        dump = plan.to_json()
        dump.update(token_index=token_index, grid=list(grid), values=values.tolist())
        out_path.with_suffix(".json").write_text(json.dumps(dump))
    return values

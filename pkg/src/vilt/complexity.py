"""Closed-form parameter and FLOPs accounting, and a forward-latency micro-benchmark."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .model import ModelConfig

FLOPS_CONVENTION = (
    "1 MAC = 2 FLOPs; matrix multiplies only (patch projection, QKV/output projections, "
    "attention scores and mixing, MLP, pooler, heads); softmax, LayerNorm, GELU, "
    "embedding lookups and additions excluded"
)


@dataclass
class CostReport:
    params_by_component: dict[str, int] = field(default_factory=dict)
    total_params: int = 0
    flops_by_component: dict[str, int] = field(default_factory=dict)
    flops: int = 0
    visual_tokens: int | None = None
    text_tokens: int | None = None
    convention: str = FLOPS_CONVENTION
    latency_ms: dict | None = None
    hardware: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = []
        if self.params_by_component:
            lines.append(f"{'component':<28}{'params':>16}")
            for k, v in self.params_by_component.items():
                lines.append(f"{k:<28}{v:>16,}")
            lines.append(f"{'total':<28}{self.total_params:>16,}  ({self.total_params / 1e6:.2f} M)")
        if self.flops_by_component:
            lines.append("")
            lines.append(f"{'component':<28}{'FLOPs':>20}   @ {self.visual_tokens}+{self.text_tokens} tokens")
            for k, v in self.flops_by_component.items():
                lines.append(f"{k:<28}{v:>20,}")
            lines.append(f"{'total':<28}{self.flops:>20,}  ({self.flops / 1e9:.2f} G)")
        if self.latency_ms:
            lines.append("")
            for size, stats in self.latency_ms.items():
                lines.append(f"latency {size:<20} median {stats['median']:.3f} ms  mean {stats['mean']:.3f} ms")
            lines.append(f"hardware: {self.hardware}")
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines)


def _affine(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def count_params(cfg: ModelConfig, include_text_embedder: bool = False, heads: tuple[str, ...] = ("itm",)) -> CostReport:
    """Closed-form parameter counts per component.

    The text embedder (word table, text position table and text class vector)
    is excluded unless requested. ``heads`` may name any of ``itm``, ``mlm``, ``mpp``.
    """
    h = cfg.hidden
    gh, gw = cfg.pos_grid
    layer = (
        2 * h  # ln1
        + 4 * _affine(h, h)  # q, k, v, o
        + 2 * h  # ln2
        + _affine(h, cfg.mlp) + _affine(cfg.mlp, h)
    )
    comp = {}
    if include_text_embedder:
        comp["text_embedder"] = cfg.vocab_size * h + (cfg.max_text_len + 1) * h + h
    comp["patch_projection"] = _affine(cfg.patch_dim, h)
    comp["visual_class_and_pos"] = h + gh * gw * h + h
    comp["modal_type"] = 2 * h
    comp["transformer_layers"] = cfg.depth * layer
    comp["final_ln"] = 2 * h
    comp["pooler"] = _affine(h, h)
    if "itm" in heads:
        comp["itm_head"] = _affine(h, 2)
    if "mlm" in heads:
        comp["mlm_head"] = _affine(h, h) + 2 * h + _affine(h, cfg.vocab_size)
    if "mpp" in heads:
        comp["mpp_head"] = _affine(h, 3)
    return CostReport(params_by_component=comp, total_params=sum(comp.values()))


def count_flops(cfg: ModelConfig, n_visual: int, n_text: int, heads: tuple[str, ...] = ("itm",)) -> CostReport:
    """FLOPs of one forward pass with ``n_visual`` patches and ``n_text`` word tokens."""
    if n_visual < 0 or n_text < 0:
        raise ValueError("token counts must be non-negative")
    h, d = cfg.hidden, cfg.depth
    s = n_visual + n_text + 2
    macs = {
        "patch_projection": n_visual * cfg.patch_dim * h,
        "qkv_out_projection": d * s * 4 * h * h,
        "attention": d * 2 * s * s * h,
        "mlp": d * s * 2 * h * cfg.mlp,
        "pooler": h * h,
    }
    if "itm" in heads:
        macs["itm_head"] = h * 2
    flops = {k: 2 * v for k, v in macs.items()}
    return CostReport(flops_by_component=flops, flops=sum(flops.values()),
                      visual_tokens=n_visual, text_tokens=n_text)


def hardware_string() -> str:
    return f"{platform.processor() or platform.machine()}; {platform.system()}; torch {torch.__version__}; threads {torch.get_num_threads()}"


@torch.no_grad()
def bench_latency(cfg: ModelConfig, sizes: list[tuple[int, int]], reps: int = 10, warmup: int = 2,
                  seed: int = 0) -> CostReport:
    """Median and mean forward wall time (ms) per ``(n_visual, n_text)`` size."""
    from .image import ImageBatch
    from .model import ViLT
    from .text import TokenBatch

    model = ViLT(cfg, seed=seed).eval()
    gh, gw = cfg.pos_grid
    latency = {}
    for n_visual, n_text in sizes:
        ids = torch.randint(0, cfg.vocab_size, (1, n_text + 1), generator=torch.Generator().manual_seed(seed))
        tokens = TokenBatch(ids, None, torch.ones_like(ids, dtype=torch.bool), torch.full_like(ids, -100))
        pos = np.stack(np.divmod(np.arange(n_visual) % (gh * gw), gw), axis=1)
        images = ImageBatch(torch.rand(1, n_visual, cfg.patch_dim), torch.from_numpy(pos)[None],
                            torch.ones(1, n_visual, dtype=torch.bool), [(gh, gw)])
        for _ in range(warmup):
            model(tokens, images)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model(tokens, images)
            times.append((time.perf_counter() - t0) * 1e3)
        latency[f"{n_visual}+{n_text}"] = {"median": statistics.median(times), "mean": statistics.fmean(times),
                                           "reps": reps, "times": times}
    return CostReport(latency_ms=latency, hardware=hardware_string())

"""AdamW with warmup/linear decay, pre-training and fine-tuning loops, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .data import (
    Corpus, answer_inventory, itm_eval_batch, nlvr2_samples, pretrain_batch, step_rng,
    vqa_samples, write_jsonl,
)
from .downstream import (
    ClassifierHead, SimilarityHead, nlvr2_forward, retrieval_finetune_step, retrieval_metrics,
    score_grid, vqa_forward,
)
from .model import ModelConfig, ViLT
from .objectives import PretrainHeads, itm_accuracy, pretrain_loss

logger = logging.getLogger(__name__)


@dataclass
class Schedule:
    total_steps: int
    warmup_frac: float = 0.1

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.total_steps * self.warmup_frac)))


def lr_at(step: int, sched: Schedule, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    total, warm = sched.total_steps, sched.warmup_steps
    if step >= total:
        return 0.0
    if step < warm:
        return base_lr * step / warm
    return base_lr * (total - step) / (total - warm)


def no_decay(name: str) -> bool:
    """Biases and LayerNorm parameters are exempt from weight decay."""
    parts = name.split(".")
    return parts[-1] == "bias" or any(p.startswith("ln") or p.endswith("_ln") for p in parts[:-1])


@dataclass
class OptimState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], opt: OptimState,
               lr: float) -> None:
    """One in-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m = opt.exp_avg.setdefault(name, torch.zeros_like(p))
        v = opt.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        if opt.weight_decay and not no_decay(name):
            p.mul_(1.0 - lr * opt.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(opt.eps)
        p.addcdiv_(m, denom, value=-lr / c1)


# -- checkpoints --------------------------------------------------------------------

def model_parameters(model: ViLT, heads: dict[str, torch.nn.Module]) -> dict[str, torch.Tensor]:
    params = {f"model.{n}": p for n, p in model.named_parameters()}
    for key, module in heads.items():
        params.update({f"{key}.{n}": p for n, p in module.named_parameters()})
    return params


def save_checkpoint(path, cfg: RunConfig, model: ViLT, heads: dict, opt: OptimState | None = None,
                    meta: dict | None = None) -> None:
    tensors = {n: p.detach() for n, p in model_parameters(model, heads).items()}
    meta = dict(meta or {})
    meta.update(cfg.provenance())
    meta["heads"] = sorted(heads)
    if opt is not None:
        for n, t in opt.exp_avg.items():
            tensors[f"optim.exp_avg.{n}"] = t
        for n, t in opt.exp_avg_sq.items():
            tensors[f"optim.exp_avg_sq.{n}"] = t
        meta["optim"] = {"step": opt.step, "base_lr": opt.base_lr, "weight_decay": opt.weight_decay,
                         "betas": list(opt.betas), "eps": opt.eps}
    for key, module in heads.items():
        if isinstance(module, ClassifierHead):
            meta.setdefault("head_shapes", {})[key] = [module.fc1.weight.shape[0], module.fc2.weight.shape[1]]
    save_tensors(path, tensors, config=cfg.to_dict(), meta=meta)


def load_checkpoint(path):
    """Rebuild ``(cfg, model, heads, opt, meta)`` from a checkpoint file."""
    tensors, header = load_tensors(path)
    cfg = RunConfig.from_dict(header["config"])
    meta = header["meta"]
    model = ViLT(cfg.model, seed=None)
    heads: dict[str, torch.nn.Module] = {}
    for key in meta.get("heads", []):
        if key == "pretrain":
            heads[key] = PretrainHeads(cfg.model, seed=None)
        elif key == "sim":
            heads[key] = SimilarityHead(cfg.model.hidden)
        else:
            d_in, k = meta["head_shapes"][key]
            heads[key] = ClassifierHead(d_in, k, eps=cfg.model.ln_eps, seed=None)
    params = model_parameters(model, heads)
    missing = set(params) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(tensors[n])
    opt = None
    if "optim" in meta:
        o = meta["optim"]
        opt = OptimState(step=o["step"], base_lr=o["base_lr"], weight_decay=o["weight_decay"],
                         betas=tuple(o["betas"]), eps=o["eps"])
        for n in params:
            if f"optim.exp_avg.{n}" in tensors:
                opt.exp_avg[n] = tensors[f"optim.exp_avg.{n}"]
                opt.exp_avg_sq[n] = tensors[f"optim.exp_avg_sq.{n}"]
    return cfg, model, heads, opt, meta


# -- pre-training -------------------------------------------------------------------

def _grads(params):
    return {n: p.grad for n, p in params.items()}


def _zero_grad(params):
    for p in params.values():
        p.grad = None


def pretrain(
    corpus: Corpus,
    cfg: RunConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    callback=None,
):
    """Pre-train for ``cfg.steps`` steps (or until ``stop_at``), checkpointing every ``cfg.ckpt_every``.

    Each step draws its batch from a generator keyed on ``(seed, step)``, so a
    resumed run replays exactly the batches of an uninterrupted one.
    Returns ``(model, heads, log_rows)``.
    """
    torch.set_num_threads(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"
    if resume is not None:
        _, model, heads_d, opt, meta = load_checkpoint(resume)
        heads = heads_d["pretrain"]
        start = meta["step"]
    else:
        model = ViLT(cfg.model, seed=cfg.seed)
        heads = PretrainHeads(cfg.model, seed=cfg.seed + 1)
        opt = OptimState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
        start = 0
        log_path.write_text("")
    model.train()
    heads.train()
    params = model_parameters(model, {"pretrain": heads})
    sched = Schedule(cfg.steps, cfg.warmup_frac)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    rows = []
    for step in range(start, end):
        torch.manual_seed(cfg.seed * 1_000_003 + step)
        rng = step_rng(cfg.seed, step)
        batch = pretrain_batch(corpus, cfg, rng)
        total, report, _ = pretrain_loss(batch, model, heads, cfg.use_wpa, cfg.use_mpp, wpa_iters=cfg.wpa_iters)
        _zero_grad(params)
        total.backward()
        lr = lr_at(step + 1, sched, cfg.base_lr)
        adamw_step(params, _grads(params), opt, lr)
        row = {"step": step + 1, "itm": report["itm"], "mlm": report["mlm"], "wpa": report.get("wpa", 0.0),
               "mpp": report.get("mpp", 0.0), "total": report["total"], "lr": lr}
        rows.append(row)
        if (step + 1) % cfg.log_every == 0:
            write_jsonl(log_path, [row])
        if callback is not None:
            callback(row)
        done = step + 1
        if done % cfg.ckpt_every == 0 or done == end:
            save_checkpoint(out_dir / f"step{done:06d}.ckpt", cfg, model, {"pretrain": heads}, opt,
                            {"step": done, "stage": "pretrain"})
    last = out_dir / f"step{end:06d}.ckpt"
    if last.exists():
        (out_dir / "last.ckpt").write_bytes(last.read_bytes())
    return model, heads, rows


@torch.no_grad()
def evaluate_itm(model: ViLT, heads: PretrainHeads, corpus: Corpus, seed: int = 0) -> float:
    model.eval()
    tokens, images, labels = itm_eval_batch(corpus, step_rng(seed, 0, stream=7))
    _, pooled = model(tokens, images)
    return itm_accuracy(pooled, heads, labels)


# -- fine-tuning ----------------------------------------------------------------------

def _finetune_loop(loss_fn, params, cfg: RunConfig, steps: int, lr: float, seed: int, log_path=None):
    opt = OptimState(base_lr=lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
    sched = Schedule(steps, cfg.warmup_frac)
    losses = []
    for step in range(steps):
        torch.manual_seed(seed * 1_000_003 + step)
        rng = step_rng(seed, step, stream=1)
        loss = loss_fn(rng)
        _zero_grad(params)
        loss.backward()
        step_lr = lr_at(step + 1, sched, lr)
        adamw_step(params, _grads(params), opt, step_lr)
        value = float(loss.detach())
        losses.append(value)
        if log_path is not None:
            write_jsonl(log_path, [{"step": step + 1, "loss": value, "lr": step_lr}])
    return losses


def finetune_retrieval(model: ViLT, heads: PretrainHeads, corpus: Corpus, cfg: RunConfig, steps: int,
                       lr: float | None = None, n_neg: int = 15, images_per_step: int = 4, seed: int = 0,
                       log_path=None, augment_log=None):
    """Retrieval fine-tuning: per image, one positive caption against ``n_neg`` random captions."""
    model.train()
    sim = SimilarityHead.from_itm(heads)
    texts = corpus.tokens(range(len(corpus)))
    params = model_parameters(model, {"sim": sim})

    def loss_fn(rng):
        idx = rng.choice(len(corpus), size=images_per_step, replace=False)
        total = 0.0
        for i in idx:
            image = corpus.image_batch([i], rng, augment=cfg.augment, log=augment_log)
            total = total + retrieval_finetune_step(model, sim, image, texts, int(i), n_neg, rng)
        return total / len(idx)

    losses = _finetune_loop(loss_fn, params, cfg, steps, lr or cfg.base_lr, seed, log_path)
    return sim, losses


@torch.no_grad()
def evaluate_retrieval(model: ViLT, sim: SimilarityHead, corpus: Corpus, n: int | None = None):
    model.eval()
    idx = list(range(len(corpus) if n is None else min(n, len(corpus))))
    grid = score_grid(model, sim, corpus.tokens(idx), corpus.image_batch(idx))
    return retrieval_metrics(grid), grid


def finetune_cls(model: ViLT, corpus: Corpus, cfg: RunConfig, steps: int, lr: float | None = None,
                 batch_size: int = 32, seed: int = 0, log_path=None, augment_log=None):
    """Toy VQA: classify answers to templated colour/count questions."""
    model.train()
    samples = vqa_samples(corpus, np.random.default_rng(seed))
    head = ClassifierHead(cfg.model.hidden, len(answer_inventory()), eps=cfg.model.ln_eps, seed=seed + 2)
    params = model_parameters(model, {"cls": head})

    def loss_fn(rng):
        pick = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        img = [samples[k][0] for k in pick]
        tokens = corpus.tokens(None, [samples[k][1] for k in pick])
        labels = torch.tensor([samples[k][2] for k in pick])
        logits = vqa_forward(model, tokens, corpus.image_batch(img, rng, augment=cfg.augment, log=augment_log), head)
        return F.cross_entropy(logits, labels)

    losses = _finetune_loop(loss_fn, params, cfg, steps, lr or cfg.base_lr, seed, log_path)
    return head, losses


@torch.no_grad()
def evaluate_cls(model: ViLT, head: ClassifierHead, corpus: Corpus, seed: int = 0) -> float:
    model.eval()
    samples = vqa_samples(corpus, np.random.default_rng(seed))
    tokens = corpus.tokens(None, [s[1] for s in samples])
    logits = vqa_forward(model, tokens, corpus.image_batch([s[0] for s in samples]), head)
    return float((logits.argmax(-1) == torch.tensor([s[2] for s in samples])).float().mean())


def finetune_nlvr2(model: ViLT, corpus: Corpus, cfg: RunConfig, steps: int, lr: float | None = None,
                   batch_size: int = 16, seed: int = 0, log_path=None, augment_log=None):
    model.train()
    head = ClassifierHead(2 * cfg.model.hidden, 2, eps=cfg.model.ln_eps, seed=seed + 3)
    params = model_parameters(model, {"nlvr2": head})

    def loss_fn(rng):
        samples = nlvr2_samples(corpus, rng, batch_size)
        tokens = corpus.tokens(None, [s[2] for s in samples])
        im1 = corpus.image_batch([s[0] for s in samples], rng, augment=cfg.augment, log=augment_log)
        im2 = corpus.image_batch([s[1] for s in samples], rng, augment=cfg.augment, log=augment_log)
        logits = nlvr2_forward(model, tokens, im1, im2, head)
        return F.cross_entropy(logits, torch.tensor([s[3] for s in samples]))

    losses = _finetune_loop(loss_fn, params, cfg, steps, lr or cfg.base_lr, seed, log_path)
    return head, losses


@torch.no_grad()
def evaluate_nlvr2(model: ViLT, head: ClassifierHead, corpus: Corpus, n: int = 256, seed: int = 0) -> float:
    model.eval()
    samples = nlvr2_samples(corpus, step_rng(seed, 0, stream=9), n)
    tokens = corpus.tokens(None, [s[2] for s in samples])
    logits = nlvr2_forward(model, tokens, corpus.image_batch([s[0] for s in samples]),
                           corpus.image_batch([s[1] for s in samples]), head)
    return float((logits.argmax(-1) == torch.tensor([s[3] for s in samples])).float().mean())

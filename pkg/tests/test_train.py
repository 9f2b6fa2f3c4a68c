import json
import math

import numpy as np
import pytest
import torch

from conftest import small_run_config
from oracles import adamw_scalar
from vilt.checkpoint import file_hash, load_tensors, save_tensors
from vilt.data import Corpus
from vilt.model import ViLT
from vilt.objectives import PretrainHeads
from vilt.train import (
    OptimState, Schedule, adamw_step, evaluate_itm, load_checkpoint, lr_at, no_decay, pretrain,
    save_checkpoint,
)


def test_lr_schedule_points():
    s = Schedule(1000, 0.1)
    assert lr_at(0, s, 1e-4) == 0.0
    assert lr_at(100, s, 1e-4) == pytest.approx(1e-4)
    assert lr_at(50, s, 1e-4) == pytest.approx(5e-5)
    assert lr_at(550, s, 1e-4) == pytest.approx(5.0e-5)
    assert lr_at(1000, s, 1e-4) == 0.0
    assert lr_at(5000, s, 1e-4) == 0.0
    with pytest.raises(ValueError):
        Schedule(10, 0.0)


def test_no_decay_rule():
    assert no_decay("model.blocks.0.q.bias")
    assert no_decay("model.blocks.3.ln1.weight")
    assert no_decay("model.final_ln.weight")
    assert no_decay("pretrain.mlm_ln.weight")
    assert not no_decay("model.blocks.0.q.weight")
    assert not no_decay("model.word_embed")


def _scalar(value):
    return {"w": torch.tensor([value], dtype=torch.float64)}


def test_adamw_single_step_hand_computed():
    params = _scalar(0.7)
    opt = OptimState(weight_decay=0.01)
    adamw_step(params, {"w": torch.tensor([0.3], dtype=torch.float64)}, opt, lr=1e-3)
    # m_hat = g, v_hat = g^2 after one step, so the Adam part is lr * g / (|g| + eps)
    expected = 0.7 * (1 - 1e-3 * 0.01) - 1e-3 * 0.3 / (0.3 + 1e-8)
    assert abs(params["w"].item() - expected) < 1e-12


def test_adamw_matches_scalar_trace():
    grads = [0.3, -1.2, 0.05, 2.0, -0.4, 0.0, 0.9]
    params = _scalar(-0.25)
    opt = OptimState(weight_decay=0.05)
    for g in grads:
        adamw_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, opt, lr=3e-3)
    assert abs(params["w"].item() - adamw_scalar(-0.25, grads, 3e-3, 0.05)) < 1e-12


def test_adamw_zero_grad_zero_decay_is_identity():
    params = _scalar(1.5)
    adamw_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, OptimState(weight_decay=0.0), lr=1e-2)
    assert params["w"].item() == 1.5


def test_adamw_decay_is_pure_shrinkage():
    params = _scalar(2.0)
    adamw_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, OptimState(weight_decay=0.1), lr=1e-2)
    assert params["w"].item() == pytest.approx(2.0 * (1 - 1e-3), abs=1e-15)
    bias = {"x.bias": torch.tensor([2.0], dtype=torch.float64)}
    adamw_step(bias, {"x.bias": torch.zeros(1, dtype=torch.float64)}, OptimState(weight_decay=0.1), lr=1e-2)
    assert bias["x.bias"].item() == 2.0


def test_adamw_without_decay_equals_torch_adam():
    g = torch.Generator().manual_seed(0)
    w0 = torch.randn(4, 3, generator=g, dtype=torch.float64)
    ours = {"w": w0.clone()}
    ref = torch.nn.Parameter(w0.clone())
    torch_opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    opt = OptimState(weight_decay=0.0)
    for _ in range(5):
        grad = torch.randn(4, 3, generator=g, dtype=torch.float64)
        adamw_step(ours, {"w": grad}, opt, lr=1e-2)
        ref.grad = grad.clone()
        torch_opt.step()
    torch.testing.assert_close(ours["w"], ref.detach(), rtol=0, atol=1e-14)


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError, match="blocks.0.fc1.weight"):
        adamw_step(_scalar(1.0) | {"blocks.0.fc1.weight": torch.ones(1)},
                   {"blocks.0.fc1.weight": torch.tensor([float("inf")])}, OptimState(), lr=1e-3)


def test_tensor_container_round_trip(tmp_path):
    tensors = {"a": torch.randn(3, 4, dtype=torch.float64), "b": torch.arange(5), "c": torch.ones(2, dtype=torch.bool),
               "d": torch.randn(2, 2)}
    save_tensors(tmp_path / "x.ckpt", tensors, config={"k": 1}, meta={"step": 3})
    loaded, header = load_tensors(tmp_path / "x.ckpt")
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype and torch.equal(loaded[k], v)
    assert header["config"] == {"k": 1} and header["meta"] == {"step": 3}
    raw = (tmp_path / "x.ckpt").read_bytes()
    n = int.from_bytes(raw[:8], "little")
    assert json.loads(raw[8: 8 + n])["format_version"] == 1


def test_checkpoint_round_trip_with_optimizer(tmp_path):
    cfg = small_run_config()
    model, heads = ViLT(cfg.model, seed=0), PretrainHeads(cfg.model, seed=1)
    opt = OptimState(step=7)
    opt.exp_avg["model.text_cls"] = torch.full((cfg.model.hidden,), 0.5)
    opt.exp_avg_sq["model.text_cls"] = torch.full((cfg.model.hidden,), 0.25)
    save_checkpoint(tmp_path / "m.ckpt", cfg, model, {"pretrain": heads}, opt, {"step": 7})
    cfg2, model2, heads2, opt2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    assert meta["config_hash"] == cfg.hash()
    for (n, p), (_, q) in zip(model.named_parameters(), model2.named_parameters()):
        assert torch.equal(p, q), n
    assert torch.equal(heads.mlm_decoder.weight, heads2["pretrain"].mlm_decoder.weight)
    assert opt2.step == 7 and torch.equal(opt2.exp_avg_sq["model.text_cls"], opt.exp_avg_sq["model.text_cls"])


def test_pretrain_logs_and_checkpoints(tmp_path, small_corpus_dir):
    cfg = small_run_config()
    corpus = Corpus(small_corpus_dir, cfg, "train")
    _, _, rows = pretrain(corpus, cfg, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == list(range(1, 7))
    assert set(lines[0]) == {"step", "itm", "mlm", "wpa", "mpp", "total", "lr"}
    assert lines[0]["total"] == pytest.approx(lines[0]["itm"] + lines[0]["mlm"] + lines[0]["wpa"])
    assert (tmp_path / "step000003.ckpt").exists() and (tmp_path / "step000006.ckpt").exists()
    assert file_hash(tmp_path / "last.ckpt") == file_hash(tmp_path / "step000006.ckpt")
    # first-step loss sits near the uniform-softmax expectation
    expected = math.log(2) + math.log(cfg.model.vocab_size)
    assert abs(lines[0]["itm"] + lines[0]["mlm"] - expected) / expected < 0.2


def test_resume_is_bitwise_identical(tmp_path, small_corpus_dir):
    cfg = small_run_config(use_mpp=True)
    corpus = Corpus(small_corpus_dir, cfg, "train")
    pretrain(corpus, cfg, tmp_path / "full")
    pretrain(corpus, cfg, tmp_path / "part", stop_at=3)
    pretrain(corpus, cfg, tmp_path / "part", resume=tmp_path / "part" / "step000003.ckpt")
    a, _ = load_tensors(tmp_path / "full" / "step000006.ckpt")
    b, _ = load_tensors(tmp_path / "part" / "step000006.ckpt")
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    full_log = (tmp_path / "full" / "log.jsonl").read_text()
    assert (tmp_path / "part" / "log.jsonl").read_text() == full_log


def test_fixed_seed_reruns_are_identical(tmp_path, small_corpus_dir):
    cfg = small_run_config(steps=3)
    corpus = Corpus(small_corpus_dir, cfg, "train")
    pretrain(corpus, cfg, tmp_path / "a")
    pretrain(corpus, cfg, tmp_path / "b")
    assert file_hash(tmp_path / "a" / "last.ckpt") == file_hash(tmp_path / "b" / "last.ckpt")
    other = cfg.with_overrides(seed=1)
    pretrain(corpus, other, tmp_path / "c")
    a, _ = load_tensors(tmp_path / "a" / "last.ckpt")
    c, _ = load_tensors(tmp_path / "c" / "last.ckpt")
    assert not torch.equal(a["model.text_cls"], c["model.text_cls"])


def test_evaluate_itm_returns_fraction(small_corpus_dir):
    cfg = small_run_config()
    corpus = Corpus(small_corpus_dir, cfg, "val")
    acc = evaluate_itm(ViLT(cfg.model), PretrainHeads(cfg.model), corpus)
    assert 0.0 <= acc <= 1.0

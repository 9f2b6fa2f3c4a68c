import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vilt.image import ImageBatch, collate_patches, patchify, sample_patches  # noqa: E402
from vilt.model import ModelConfig, ViLT  # noqa: E402
from vilt.text import IGNORE_INDEX, TokenBatch  # noqa: E402

torch.set_num_threads(1)


def make_tokens(ids_rows, pad_id=0):
    length = max(len(r) for r in ids_rows)
    ids = torch.full((len(ids_rows), length), pad_id, dtype=torch.long)
    mask = torch.zeros_like(ids, dtype=torch.bool)
    word_ids = torch.full_like(ids, -1)
    for b, r in enumerate(ids_rows):
        ids[b, : len(r)] = torch.tensor(r)
        mask[b, : len(r)] = True
        word_ids[b, 1: len(r)] = torch.arange(len(r) - 1)
    return TokenBatch(ids, word_ids, mask, torch.full_like(ids, IGNORE_INDEX))


def make_images(cfg: ModelConfig, n_images, size=(8, 8), keep=None, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_images):
        pb = patchify(rng.random((3, *size)), cfg.patch_size)
        if keep is not None and keep[i] < len(pb):
            pb = sample_patches(pb, keep[i], rng)
        items.append(pb)
    return collate_patches(items, dtype=dtype)


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_cfg):
    return ViLT(tiny_cfg, seed=0).double()


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    from vilt.synth import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(24, seed=5, out=root, val_fraction=0.25)
    return root


def small_run_config(**overrides):
    from vilt.config import desk_config
    from vilt.synth import build_vocab

    kw = dict(steps=6, batch_size=4, ckpt_every=3, model_hidden=16, model_depth=1, model_heads=2,
              model_mlp=32, wpa_iters=10)
    kw.update(overrides)
    return desk_config(len(build_vocab())).with_overrides(**kw)


# -- acceptance reporting ---------------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

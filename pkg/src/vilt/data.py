"""In-memory corpus and batch construction for pre-training and fine-tuning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .image import (
    ImageBatch, PatchBatch, collate_patches, load_image, normalize_patches, patchify, rand_augment,
    resize_keep_aspect, sample_patches,
)
from .objectives import PretrainBatch, build_itm_pairs, mask_patches
from .text import TokenBatch, Vocabulary, read_manifest, token_mask, tokenize_batch, whole_word_mask


class Corpus:
    """Images, captions and vocabulary of a JSONL manifest, preprocessed once."""

    def __init__(self, root: str | Path, cfg, split: str | None = None, vocab: Vocabulary | None = None):
        root = Path(root)
        manifest = root / "manifest.jsonl" if root.is_dir() else root
        if not manifest.exists():
            raise FileNotFoundError(f"corpus manifest not found: {manifest}")
        self.root = manifest.parent
        records = read_manifest(manifest)
        if split is not None:
            records = [r for r in records if r["split"] == split]
        if not records:
            raise ValueError(f"no records for split {split!r} in {manifest}")
        self.records = records
        self.vocab = vocab or Vocabulary.load(self.root / "vocab.txt")
        self.cfg = cfg
        self.captions = [r["caption"] for r in records]
        self.images = [
            resize_keep_aspect(load_image(self.root / r["image"]), cfg.image_short, cfg.image_long)
            for r in records
        ]
        self.patches = [patchify(img, cfg.model.patch_size) for img in self.images]

    def __len__(self) -> int:
        return len(self.records)

    def scene(self, i: int):
        from .synth import SceneSpec

        return SceneSpec.from_dict(self.records[i]["scene"])

    def tokens(self, idx, texts=None) -> TokenBatch:
        texts = [self.captions[i] for i in idx] if texts is None else texts
        return tokenize_batch(texts, self.vocab, self.cfg.model.max_text_len + 1)

    def image_batch(self, idx, rng: np.random.Generator | None = None, sample: bool = False,
                    augment: bool = False, log: list | None = None, normalize: bool = True) -> ImageBatch:
        items: list[PatchBatch] = []
        for i in idx:
            pb = self.patches[i]
            if augment:
                img, policy = rand_augment(self.images[i], self.cfg.augment_ops, self.cfg.augment_magnitude, rng)
                pb = patchify(img, self.cfg.model.patch_size)
                if log is not None:
                    log.append({"index": int(i), "image": self.records[i]["image"],
                                "policy": [[n, p] for n, p in policy]})
            if sample:
                pb = sample_patches(pb, self.cfg.max_patches, rng)
            items.append(pb)
        batch = collate_patches(items)
        return self.normalize(batch) if normalize else batch

    def normalize(self, batch: ImageBatch) -> ImageBatch:
        return normalize_batch(batch, self.cfg)

    def all_images(self) -> ImageBatch:
        return self.normalize(collate_patches(self.patches))


def normalize_batch(batch: ImageBatch, cfg) -> ImageBatch:
    patches = normalize_patches(batch.patches, cfg.pixel_mean, cfg.pixel_std, cfg.model.channels)
    return ImageBatch(patches, batch.grid_pos, batch.mask, batch.grid_shapes)


def prepare_image(img: np.ndarray, cfg) -> ImageBatch:
    """Resize, patchify and normalise one image the way the corpus does (no sampling)."""
    img = resize_keep_aspect(img, cfg.image_short, cfg.image_long)
    return normalize_batch(collate_patches([patchify(img, cfg.model.patch_size)]), cfg)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, step); resuming never needs saved RNG state."""
    return np.random.default_rng([seed, step, stream])


def pretrain_batch(corpus: Corpus, cfg, rng: np.random.Generator) -> PretrainBatch:
    n = len(corpus)
    idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    image_idx, keep = build_itm_pairs(idx, n, rng, cfg.itm_keep_prob)
    tokens = corpus.tokens(idx)
    mask_fn = whole_word_mask if cfg.wwm else token_mask
    tokens = mask_fn(tokens, corpus.vocab, cfg.mlm_prob, rng)
    raw = corpus.image_batch(image_idx, rng, sample=True, normalize=False)
    images = corpus.normalize(raw)
    mpp_labels = mpp_mask = None
    if cfg.use_mpp:
        # targets are mean RGB in pixel units; masked inputs become the dataset mean
        _, mpp_labels, mpp_mask = mask_patches(raw, rng, cfg.mpp_prob)
        images.patches = images.patches.masked_fill(mpp_mask[..., None], 0.0)
    return PretrainBatch(tokens, images, torch.from_numpy(keep), mpp_labels, mpp_mask)


def itm_eval_batch(corpus: Corpus, rng: np.random.Generator, p_keep: float = 0.5):
    """Every caption once, paired with its own image or a different one."""
    idx = np.arange(len(corpus))
    image_idx, keep = build_itm_pairs(idx, len(corpus), rng, p_keep)
    return corpus.tokens(idx), corpus.image_batch(image_idx), torch.from_numpy(keep)


# -- toy downstream tasks ---------------------------------------------------------

COUNT_WORDS = ("one", "two", "three", "four")


def answer_inventory() -> list[str]:
    from .synth import COLORS

    return list(COLORS) + list(COUNT_WORDS)


def vqa_samples(corpus: Corpus, rng: np.random.Generator) -> list[tuple[int, str, int]]:
    """(image index, question, answer id) triples: object colours and object counts."""
    answers = answer_inventory()
    out = []
    for i in range(len(corpus)):
        spec = corpus.scene(i)
        out.append((i, "how many objects are there ?", answers.index(COUNT_WORDS[len(spec.objects) - 1])))
        shapes = [o.shape for o in spec.objects]
        for o in spec.objects:
            if shapes.count(o.shape) == 1:
                out.append((i, f"what color is the {o.shape} ?", answers.index(o.color)))
    return out


def nlvr2_samples(corpus: Corpus, rng: np.random.Generator, n: int) -> list[tuple[int, int, str, int]]:
    """(image1, image2, statement, label): label is 1 when the stated object appears in both images."""
    out = []
    m = len(corpus)
    for _ in range(n):
        i, j = rng.choice(m, size=2, replace=False)
        a, b = corpus.scene(i), corpus.scene(j)
        kinds_b = {(o.color, o.shape) for o in b.objects}
        kinds_a = [(o.color, o.shape) for o in a.objects]
        shared = [k for k in kinds_a if k in kinds_b]
        if shared and rng.random() < 0.5:
            color, shape = shared[rng.integers(len(shared))]
        else:
            color, shape = kinds_a[rng.integers(len(kinds_a))]
        label = int((color, shape) in kinds_b)
        out.append((int(i), int(j), f"there is a {color} {shape}", label))
    return out


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

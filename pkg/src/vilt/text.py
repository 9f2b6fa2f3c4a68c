"""Tokenization, vocabulary files and MLM masking."""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

IGNORE_INDEX = -100

SPECIAL_KEYS = ("pad", "cls", "sep", "mask", "unk")
DEFAULT_SPECIALS = {
    "pad": "[PAD]",
    "cls": "[CLS]",
    "sep": "[SEP]",
    "mask": "[MASK]",
    "unk": "[UNK]",
}


class Vocabulary:
    """Ordered WordPiece vocabulary. Continuation pieces carry a ``##`` prefix."""

    def __init__(self, tokens: Sequence[str], specials: dict[str, str] | None = None):
        specials = dict(DEFAULT_SPECIALS if specials is None else specials)
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [k for k in SPECIAL_KEYS if k not in specials]
        if missing:
            raise ValueError(f"special tokens not declared: {missing}")
        for key in SPECIAL_KEYS:
            if specials[key] not in self.index:
                raise ValueError(f"special token {specials[key]!r} ({key}) not in vocabulary")
        self.specials = specials
        self.pad_id = self.index[specials["pad"]]
        self.cls_id = self.index[specials["cls"]]
        self.sep_id = self.index[specials["sep"]]
        self.mask_id = self.index[specials["mask"]]
        self.unk_id = self.index[specials["unk"]]
        self.special_ids = frozenset(
            (self.pad_id, self.cls_id, self.sep_id, self.mask_id, self.unk_id)
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def from_words(cls, words: Iterable[str], extra_pieces: Iterable[str] = ()) -> "Vocabulary":
        tokens = [DEFAULT_SPECIALS[k] for k in SPECIAL_KEYS]
        for tok in list(words) + list(extra_pieces):
            if tok not in tokens:
                tokens.append(tok)
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        """Write ``path`` (one token per line) and a ``.json`` sidecar naming the specials."""
        path = Path(path)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        path.with_suffix(".json").write_text(json.dumps(self.specials, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        tokens = path.read_text(encoding="utf-8").splitlines()
        while tokens and tokens[-1] == "":
            tokens.pop()
        sidecar = path.with_suffix(".json")
        specials = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else None
        return cls(tokens, specials)


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_split(text: str) -> list[str]:
    """Lowercase, strip accents, split on whitespace and isolate punctuation."""
    text = unicodedata.normalize("NFD", text.lower())
    text = "".join(ch for ch in text if unicodedata.category(ch) != "Mn")
    words: list[str] = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[str]:
    """Greedy longest-match-first split of one word; ``[UNK]`` if any piece is missing."""
    if len(word) > max_chars:
        return [vocab.specials["unk"]]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab.index:
                found = sub
                break
            end -= 1
        if found is None:
            return [vocab.specials["unk"]]
        pieces.append(found)
        start = end
    return pieces


@dataclass
class TokenRow:
    ids: list[int]
    word_ids: list[int]


@dataclass
class TokenBatch:
    """Padded token ids. Column 0 is always the class slot."""

    ids: torch.Tensor  # [B, L] long
    word_ids: torch.Tensor | None  # [B, L] long, -1 for specials/padding
    attn_mask: torch.Tensor  # [B, L] bool
    mlm_labels: torch.Tensor  # [B, L] long, IGNORE_INDEX where not predicted

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    def index_select(self, idx) -> "TokenBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TokenBatch(
            ids=self.ids[idx],
            word_ids=None if self.word_ids is None else self.word_ids[idx],
            attn_mask=self.attn_mask[idx],
            mlm_labels=self.mlm_labels[idx],
        )


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenRow:
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [vocab.cls_id]
    word_ids = [-1]
    for w, word in enumerate(basic_split(text)):
        for piece in wordpiece(word, vocab):
            ids.append(vocab.index[piece])
            word_ids.append(w)
    return TokenRow(ids[:max_len], word_ids[:max_len])


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if i in (vocab.cls_id, vocab.pad_id, vocab.sep_id):
            continue
        tok = vocab.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def collate_tokens(rows: Sequence[TokenRow], pad_id: int) -> TokenBatch:
    length = max(len(r.ids) for r in rows)
    ids = torch.full((len(rows), length), pad_id, dtype=torch.long)
    word_ids = torch.full((len(rows), length), -1, dtype=torch.long)
    mask = torch.zeros((len(rows), length), dtype=torch.bool)
    for b, row in enumerate(rows):
        n = len(row.ids)
        ids[b, :n] = torch.tensor(row.ids)
        word_ids[b, :n] = torch.tensor(row.word_ids)
        mask[b, :n] = True
    labels = torch.full_like(ids, IGNORE_INDEX)
    return TokenBatch(ids, word_ids, mask, labels)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> TokenBatch:
    return collate_tokens([tokenize(t, vocab, max_len) for t in texts], vocab.pad_id)


def _corrupt(ids, labels, positions, vocab, rng, random_pool):
    labels[positions] = ids[positions]
    r = rng.random()
    if r < 0.8:
        ids[positions] = vocab.mask_id
    elif r < 0.9:
        ids[positions] = rng.choice(random_pool, size=len(positions))
    # else: keep the original ids


def _random_pool(vocab: Vocabulary) -> np.ndarray:
    return np.array([i for i in range(len(vocab)) if i not in vocab.special_ids])


def whole_word_mask(
    batch: TokenBatch, vocab: Vocabulary, p_mask: float, rng: np.random.Generator
) -> TokenBatch:
    """Select whole words with probability ``p_mask`` and corrupt all their subwords together.

    A selected word is replaced by ``[MASK]`` (80%), random tokens (10%) or left
    unchanged (10%); the outcome is drawn once per word, never per subword.
    """
    if batch.word_ids is None:
        raise ValueError("whole-word masking needs word_ids")
    if not 0.0 <= p_mask < 1.0:
        raise ValueError("p_mask must lie in [0, 1)")
    ids = batch.ids.numpy().copy()
    word_ids = batch.word_ids.numpy()
    labels = np.full_like(ids, IGNORE_INDEX)
    valid = batch.attn_mask.numpy() & ~np.isin(ids, list(vocab.special_ids))
    pool = _random_pool(vocab)
    for b in range(ids.shape[0]):
        row_words = np.unique(word_ids[b][valid[b] & (word_ids[b] >= 0)])
        for w in row_words:
            if rng.random() >= p_mask:
                continue
            positions = np.flatnonzero((word_ids[b] == w) & valid[b])
            _corrupt(ids[b], labels[b], positions, vocab, rng, pool)
    return replace(batch, ids=torch.from_numpy(ids), mlm_labels=torch.from_numpy(labels))


def token_mask(
    batch: TokenBatch, vocab: Vocabulary, p_mask: float, rng: np.random.Generator
) -> TokenBatch:
    """Plain BERT masking: each subword is selected and corrupted independently."""
    ids = batch.ids.numpy().copy()
    labels = np.full_like(ids, IGNORE_INDEX)
    valid = batch.attn_mask.numpy() & ~np.isin(ids, list(vocab.special_ids))
    pool = _random_pool(vocab)
    for b, i in zip(*np.nonzero(valid)):
        if rng.random() < p_mask:
            _corrupt(ids[b], labels[b], np.array([i]), vocab, rng, pool)
    return replace(batch, ids=torch.from_numpy(ids), mlm_labels=torch.from_numpy(labels))


def read_manifest(path: str | Path) -> list[dict]:
    """Read a UTF-8 JSONL corpus manifest with ``image``, ``caption`` and ``split`` fields."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("image", "caption", "split"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            records.append(rec)
    return records

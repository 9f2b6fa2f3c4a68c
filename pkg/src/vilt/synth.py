"""Deterministic synthetic shapes corpus: scenes on a cell grid with templated captions."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import save_image
from .text import Vocabulary

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1),
}
RELATIONS = ("above", "below", "left", "right")

# every word a caption or toy question can use
WORDS = [
    "a", "an", "the", "and", "of", "to", "is", "are", "there", "in", "on", "with",
    "image", "picture", "scene", "shows", "showing", "contains", "next", "at", "top", "bottom",
    "middle", "corner", "side", "object", "objects", "shape", "shapes",
    "what", "color", "how", "many", "one", "two", "three", "four", "yes", "no",
    "above", "below", "left", "right",
    "red", "green", "blue", "circle", "square",
    "small", "large", "big", "white", "background", "it", "this", "that", "both", "images",
    ",", ".", "?",
]
# multi-piece words exercise the "##" continuation path
SPLIT_WORDS = {"yellow": ["yel", "##low"], "triangle": ["tri", "##angle"]}


def build_vocab() -> Vocabulary:
    pieces = [p for parts in SPLIT_WORDS.values() for p in parts]
    return Vocabulary.from_words(WORDS, pieces)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    canvas: int = 48
    grid: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.objects) > 4:
            raise ValueError("at most 4 objects per scene")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects overlap in the same cell")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ValueError(f"unknown object {o}")
            if not all(0 <= x < self.grid for x in o.cell):
                raise ValueError(f"cell {o.cell} outside the {self.grid}x{self.grid} grid")

    @property
    def cell_px(self) -> int:
        return self.canvas // self.grid

    def to_dict(self) -> dict:
        return {"objects": [[o.shape, o.color, list(o.cell)] for o in self.objects],
                "canvas": self.canvas, "grid": self.grid, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = [SceneObject(s, c, tuple(cell)) for s, c, cell in d["objects"]]
        return cls(objs, d["canvas"], d["grid"], d["seed"])


def random_scene(rng: np.random.Generator, canvas: int = 48, grid: int = 3,
                 min_objects: int = 1, max_objects: int = 3, seed: int = 0) -> SceneSpec:
    k = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(grid * grid, size=k, replace=False)
    objs = [
        SceneObject(SHAPES[rng.integers(len(SHAPES))], list(COLORS)[rng.integers(len(COLORS))],
                    (int(c // grid), int(c % grid)))
        for c in cells
    ]
    return SceneSpec(objs, canvas, grid, seed)


def render(spec: SceneSpec) -> np.ndarray:
    """Filled shapes on a white background, ``[3, canvas, canvas]`` in [0, 1]."""
    img = np.ones((3, spec.canvas, spec.canvas), dtype=np.float32)
    cp = spec.cell_px
    margin = max(1, cp // 8)
    yy, xx = np.mgrid[0:cp, 0:cp] + 0.5
    lo, hi = margin, cp - margin
    for o in spec.objects:
        if o.shape == "square":
            inside = (yy >= lo) & (yy <= hi) & (xx >= lo) & (xx <= hi)
        elif o.shape == "circle":
            r = (hi - lo) / 2
            inside = (yy - cp / 2) ** 2 + (xx - cp / 2) ** 2 <= r * r
        else:
            # apex at the top centre, base along the bottom margin
            t = (yy - lo) / (hi - lo)
            inside = (yy >= lo) & (yy <= hi) & (np.abs(xx - cp / 2) <= t * (hi - lo) / 2)
        r0, c0 = o.cell[0] * cp, o.cell[1] * cp
        region = img[:, r0:r0 + cp, c0:c0 + cp]
        for ch, value in enumerate(COLORS[o.color]):
            region[ch][inside] = value
    return img


def relation(a: SceneObject, b: SceneObject, rng: np.random.Generator | None = None) -> str:
    """A spatial relation word that holds for ``a`` relative to ``b``."""
    options = []
    if a.cell[0] < b.cell[0]:
        options.append("above")
    if a.cell[0] > b.cell[0]:
        options.append("below")
    if a.cell[1] < b.cell[1]:
        options.append("left")
    if a.cell[1] > b.cell[1]:
        options.append("right")
    if rng is None or len(options) == 1:
        return options[0]
    return options[int(rng.integers(len(options)))]


def _phrase(o: SceneObject, article: str = "a") -> str:
    return f"{article} {o.color} {o.shape}"


def _rel_phrase(rel: str) -> str:
    return f"{rel} of" if rel in ("left", "right") else rel


def caption(spec: SceneSpec, rng: np.random.Generator) -> str:
    if not spec.objects:
        raise ValueError("cannot caption an empty scene")
    objs = list(spec.objects)
    order = rng.permutation(len(objs))
    objs = [objs[i] for i in order]
    if len(objs) == 1:
        return _phrase(objs[0])
    parts = []
    for a, b in zip(objs[:-1], objs[1:]):
        parts.append(f"{_phrase(a)} {_rel_phrase(relation(a, b, rng))} {_phrase(b)}")
    return " and ".join(parts)


def caption_relations(text: str) -> list[tuple[str, str, str, str, str]]:
    """Parse ``(color, shape, relation, color, shape)`` tuples back out of a caption."""
    words = text.split()

    def phrase_at(k):
        return k + 2 < len(words) and words[k] == "a" and words[k + 1] in COLORS and words[k + 2] in SHAPES

    found = []
    for i in range(len(words)):
        j = i + 3
        if not (phrase_at(i) and j < len(words) and words[j] in RELATIONS):
            continue
        rel = words[j]
        k = j + (2 if rel in ("left", "right") else 1)
        if phrase_at(k):
            found.append((words[i + 1], words[i + 2], rel, words[k + 1], words[k + 2]))
    return found


def scene_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def generate_corpus(n: int, seed: int, out: str | Path, canvas: int = 48, grid: int = 3,
                    min_objects: int = 1, max_objects: int = 3, val_fraction: float = 0.125) -> Path:
    """Write ``n`` PNG images and ``manifest.jsonl`` under ``out``; return the manifest path."""
    if n < 2:
        raise ValueError("a corpus needs at least 2 pairs")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_val = max(1, int(round(n * val_fraction))) if n > 2 else 1
    rows = []
    for i in range(n):
        s = scene_seed(seed, i)
        rng = np.random.default_rng(s)
        spec = random_scene(rng, canvas, grid, min_objects, max_objects, seed=s)
        name = f"images/{i:06d}.png"
        save_image(render(spec), out / name)
        rows.append({
            "image": name,
            "caption": caption(spec, rng),
            "split": "val" if i >= n - n_val else "train",
            "scene": spec.to_dict(),
        })
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    build_vocab().save(out / "vocab.txt")
    return manifest


def manifest_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cell_patch_mask(spec: SceneSpec, obj: SceneObject, patch_size: int) -> np.ndarray:
    """Boolean patch grid marking patches that lie inside the object's cell."""
    gp = spec.canvas // patch_size
    mask = np.zeros((gp, gp), dtype=bool)
    cp = spec.cell_px
    r0, c0 = obj.cell[0] * cp, obj.cell[1] * cp
    rows = slice(r0 // patch_size, -(-(r0 + cp) // patch_size))
    cols = slice(c0 // patch_size, -(-(c0 + cp) // patch_size))
    mask[rows, cols] = True
    return mask

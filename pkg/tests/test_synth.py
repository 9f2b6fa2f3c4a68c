import json

import numpy as np
import pytest

from vilt.synth import (
    COLORS, RELATIONS, SHAPES, SceneObject, SceneSpec, build_vocab, caption, caption_relations,
    cell_patch_mask, generate_corpus, manifest_hash, random_scene, relation, render,
)
from vilt.text import tokenize


def test_empty_scene_is_white():
    img = render(SceneSpec([], canvas=24))
    assert img.shape == (3, 24, 24) and np.all(img == 1.0)


def test_red_circle_pixel_statistics():
    spec = SceneSpec([SceneObject("circle", "red", (0, 0))])
    img = render(spec)
    cell = img[:, :16, :16]
    assert cell[0].mean() > cell[2].mean()
    assert np.all(img[:, 16:, 16:] == 1.0)


def test_render_is_deterministic():
    spec = random_scene(np.random.default_rng(3), seed=3)
    assert np.array_equal(render(spec), render(SceneSpec.from_dict(spec.to_dict())))


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec([SceneObject("circle", "red", (0, 0)), SceneObject("square", "blue", (0, 0))])
    with pytest.raises(ValueError):
        SceneSpec([SceneObject("circle", "red", (i // 3, i % 3)) for i in range(5)])
    with pytest.raises(ValueError):
        SceneSpec([SceneObject("hexagon", "red", (0, 0))])
    with pytest.raises(ValueError):
        SceneSpec([SceneObject("circle", "red", (3, 0))])


def test_single_object_caption_template():
    spec = SceneSpec([SceneObject("triangle", "yellow", (1, 1))])
    assert caption(spec, np.random.default_rng(0)) == "a yellow triangle"
    with pytest.raises(ValueError):
        caption(SceneSpec([]), np.random.default_rng(0))


def test_relation_geometry():
    a = SceneObject("circle", "red", (0, 1))
    b = SceneObject("square", "blue", (2, 1))
    assert relation(a, b) == "above" and relation(b, a) == "below"
    c = SceneObject("square", "green", (0, 2))
    assert relation(a, c) == "left" and relation(c, a) == "right"


def _holds(spec, rel):
    c1, s1, word, c2, s2 = rel
    find = lambda c, s: [o for o in spec.objects if o.color == c and o.shape == s]
    return any(relation_holds(a, b, word) for a in find(c1, s1) for b in find(c2, s2))


def relation_holds(a, b, word):
    dr, dc = b.cell[0] - a.cell[0], b.cell[1] - a.cell[1]
    return {"above": dr > 0, "below": dr < 0, "left": dc > 0, "right": dc < 0}[word]


def test_captions_consistent_with_coordinates():
    rng = np.random.default_rng(0)
    checked = 0
    for i in range(300):
        spec = random_scene(rng, min_objects=2, max_objects=4)
        text = caption(spec, rng)
        rels = caption_relations(text)
        assert len(rels) == len(spec.objects) - 1
        for rel in rels:
            assert rel[2] in RELATIONS
            assert _holds(spec, rel), (text, spec)
            checked += 1
    assert checked > 300


def test_every_caption_word_in_vocab():
    vocab = build_vocab()
    assert 55 <= len(vocab.tokens) <= 80
    rng = np.random.default_rng(1)
    for _ in range(200):
        text = caption(random_scene(rng, max_objects=4), rng)
        assert vocab.unk_id not in tokenize(text, vocab, 64).ids


def test_generate_corpus(tmp_path):
    manifest = generate_corpus(10, seed=7, out=tmp_path / "a", val_fraction=0.2)
    rows = [json.loads(l) for l in manifest.read_text().splitlines()]
    assert len(rows) == 10
    assert [r["split"] for r in rows].count("val") == 2
    assert (tmp_path / "a" / "vocab.txt").exists()
    for r in rows:
        assert (tmp_path / "a" / r["image"]).exists()
        spec = SceneSpec.from_dict(r["scene"])
        assert 1 <= len(spec.objects) <= 3
    again = generate_corpus(10, seed=7, out=tmp_path / "b", val_fraction=0.2)
    assert manifest_hash(manifest) == manifest_hash(again)
    assert (tmp_path / "a" / rows[3]["image"]).read_bytes() == (tmp_path / "b" / rows[3]["image"]).read_bytes()
    other = generate_corpus(10, seed=8, out=tmp_path / "c", val_fraction=0.2)
    assert manifest_hash(other) != manifest_hash(manifest)
    with pytest.raises(ValueError):
        generate_corpus(1, seed=0, out=tmp_path / "d")


def test_cell_patch_mask():
    spec = SceneSpec([SceneObject("circle", "red", (1, 2))], canvas=48, grid=3)
    mask = cell_patch_mask(spec, spec.objects[0], 8)
    assert mask.shape == (6, 6) and mask.sum() == 4
    assert mask[2:4, 4:6].all()

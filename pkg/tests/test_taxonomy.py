import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dethub.errors import ConfigError, DataError
from dethub.taxonomy import (
    DEFAULT_TOKENIZER,
    CategoryVocabulary,
    EmbedderSpec,
    EmbeddingCache,
    ExternalEmbedder,
    build_prompt,
    embed_prompt,
    make_target_matrix,
    read_vocabulary,
    tokenize_prompt,
)

names = st.lists(
    st.text(alphabet="abcdefghijklmnopqrstuvwxyz ", min_size=1, max_size=14)
    .map(str.strip).filter(bool),
    min_size=1, max_size=6, unique=True,
)


def test_build_prompt_examples():
    assert build_prompt(["person", "cat", "dog", "car"]) == "person, cat, dog, car"
    assert build_prompt(["circle"]) == "circle"
    assert build_prompt(CategoryVocabulary("x", ("a", "b", "c"))) == "a, b, c"


def test_build_prompt_empty():
    with pytest.raises(DataError, match="empty vocabulary"):
        build_prompt([])


def test_vocabulary_rejects_duplicates_and_commas():
    with pytest.raises((DataError, ConfigError, ValueError)):
        CategoryVocabulary("x", ("a", "a"))
    with pytest.raises((DataError, ConfigError, ValueError)):
        CategoryVocabulary("x", ("a, b",))
    assert CategoryVocabulary("x", ("a", "b")).category_count == 2


def test_read_vocabulary(tmp_path):
    txt = tmp_path / "v.txt"
    txt.write_text("person\n\ncat\n", encoding="utf-8")
    assert read_vocabulary(txt).categories == ("person", "cat")
    coco = tmp_path / "c.json"
    coco.write_text(json.dumps({"categories": [{"id": 7, "name": "b"}, {"id": 2, "name": "a"}]}))
    assert read_vocabulary(coco).categories == ("a", "b")


def test_tokenize_fits():
    p = tokenize_prompt("person, cat", 512)
    assert p.truncated_categories == ()
    assert p.tokens[slice(*p.span_map[0])] == ("person",)
    assert p.tokens[slice(*p.span_map[1])] == ("cat",)
    assert p.valid_length == 3  # person , cat


def test_tokenize_long_vocabulary_truncates():
    vocab = [f"object{i}" for i in range(1600)]
    p = tokenize_prompt(build_prompt(vocab), 512)
    assert p.truncated_categories
    assert p.valid_length <= 512
    assert set(p.span_map) | set(p.truncated_categories) == set(range(1600))


def test_boundary_truncation_drops_whole_category():
    # "a" alone is one token; "a, b" needs three.
    for max_length in (2, 3):
        p = tokenize_prompt("a, b", max_length)
        if max_length == 2:
            assert p.truncated_categories == (1,)
            assert list(p.span_map) == [0]
        else:
            assert p.truncated_categories == ()


def test_max_length_too_small():
    with pytest.raises(ConfigError):
        tokenize_prompt("a", 1)


def test_long_word_splits_into_pieces():
    toks = DEFAULT_TOKENIZER.tokenize("refrigerator")
    assert toks[0] == "refrig" and all(t.startswith("##") for t in toks[1:])
    assert DEFAULT_TOKENIZER.decode(toks) == "refrigerator"


@settings(max_examples=60, deadline=None)
@given(names, st.integers(2, 40))
def test_never_split_and_span_soundness(cats, max_length):
    p = tokenize_prompt(build_prompt(cats), max_length)
    assert p.valid_length <= max_length
    spans = sorted(p.span_map.values())
    for (a0, b0), (a1, _) in zip(spans, spans[1:]):
        assert b0 <= a1
    for c, (a, b) in p.span_map.items():
        assert b > a
        full = DEFAULT_TOKENIZER.tokenize(cats[c])
        assert list(p.tokens[a:b]) == full  # whole category inside the sequence
        assert DEFAULT_TOKENIZER.decode(p.tokens[a:b]) == DEFAULT_TOKENIZER.normalize(cats[c])
    # separators belong to no span
    covered = {i for a, b in spans for i in range(a, b)}
    assert all(p.tokens[i] == "," for i in range(p.valid_length) if i not in covered)
    # surviving categories form a prefix
    assert set(p.span_map) == set(range(len(p.span_map)))


def test_never_split_exhaustive_boundaries():
    cats = ["traffic light", "refrigerator", "cat", "hair drier"]
    text = build_prompt(cats)
    full = len(DEFAULT_TOKENIZER.tokenize(text))
    for max_length in range(2, full + 2):
        p = tokenize_prompt(text, max_length)
        for c, (a, b) in p.span_map.items():
            assert list(p.tokens[a:b]) == DEFAULT_TOKENIZER.tokenize(cats[c])
        assert len(p.span_map) + len(p.truncated_categories) == len(cats)


def test_embed_frozen_and_seeded():
    p = tokenize_prompt("person, cat", 16)
    a = embed_prompt(p, EmbedderSpec(seed=0), 64)
    b = embed_prompt(p, EmbedderSpec(seed=0), 64)
    c = embed_prompt(p, EmbedderSpec(seed=1), 64)
    assert np.array_equal(a.E, b.E) and np.array_equal(a.F_E, b.F_E)
    assert not np.array_equal(a.E, c.E)
    assert a.E.shape == (16, 64) and a.F_E.shape == (16, 64)
    assert not a.E.flags.writeable


def test_embedding_rows_match_tokenizer_count():
    p = tokenize_prompt("person, cat", 512)
    emb = embed_prompt(p)
    oracle = len(DEFAULT_TOKENIZER.tokenize("person, cat"))
    assert int(emb.valid_mask.sum()) == oracle
    assert np.all(emb.E[oracle:] == 0) and np.any(emb.E[:oracle] != 0)
    assert np.allclose(np.linalg.norm(emb.F_E[:oracle], axis=1), 1.0, atol=1e-5)


def test_embed_dimension_mismatch():
    p = tokenize_prompt("a", 4)
    ext = ExternalEmbedder(lambda toks: np.ones((len(toks), 8)), EmbedderSpec("external", 8), d=16)
    with pytest.raises(ConfigError):
        embed_prompt(p, d=32, embedder=ext)
    bad = ExternalEmbedder(lambda toks: np.ones((len(toks), 5)), EmbedderSpec("external", 8), d=16)
    with pytest.raises(ConfigError):
        embed_prompt(p, d=16, embedder=bad)


def test_external_embedder_cache(tmp_path):
    calls = []

    def encode(tokens):
        calls.append(tokens)
        return np.random.default_rng(len(calls)).normal(size=(len(tokens), 8))

    ext = ExternalEmbedder(encode, EmbedderSpec("external", 8), d=16)
    cache = EmbeddingCache(tmp_path)
    p = tokenize_prompt("circle, square", 8)
    a = embed_prompt(p, d=16, embedder=ext, cache=cache)
    b = embed_prompt(p, d=16, embedder=ext, cache=cache)
    assert len(calls) == 1 and cache.hits == 1
    assert np.array_equal(a.E, b.E) and np.array_equal(a.F_E, b.F_E)


def test_target_matrix_examples():
    p = tokenize_prompt("person, cat, traffic light", 16)
    t = make_target_matrix([1, 2], p, [None, 0, 1])
    assert not t[0].any()
    a, b = p.span_map[1]
    assert t[1, a:b].all() and t[1].sum() == b - a
    a, b = p.span_map[2]
    assert b - a == 2 and t[2, a:b].all() and t[2].sum() == 2


def test_target_matrix_truncated_label():
    p = tokenize_prompt("a, b", 2)
    with pytest.raises(DataError, match="'B'.*'b'"):
        make_target_matrix([1], p, [0], dataset_name="B")


@settings(max_examples=40, deadline=None)
@given(names, st.integers(2, 30), st.data())
def test_target_support_within_spans(cats, max_length, data):
    p = tokenize_prompt(build_prompt(cats), max_length)
    kept = sorted(p.span_map)
    if not kept:
        return
    labels = data.draw(st.lists(st.sampled_from(kept), min_size=1, max_size=4))
    per_query = data.draw(st.permutations(list(range(len(labels))) + [None] * 3))
    t = make_target_matrix(labels, p, per_query)
    support = p.category_token_matrix().any(0)
    assert not t[:, ~support].any()

#!/usr/bin/env python3
"""
Synthetic compositional corpus: split construction, overlap score, persistence.
"""

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import chi2

from negrank.corpus import ClipSpan, Split
from negrank.errors import BadWeights, InsufficientVocab
from negrank.negforge import forge_lexicon
from negrank.synthgen import (
    COMPOSITION_TYPES,
    SLOT_CLASS,
    SLOT_POSITION,
    SLOTS,
    EventTuple,
    SynthConfig,
    gen_corpus,
    load_corpus,
    render_features,
    semantic_overlap,
    write_corpus,
)
from negrank.tagger import PRIMITIVE_CLASSES, PrimitiveClass, build_dictionary

SMALL = SynthConfig(
    n_train=80,
    n_test=12,
    T=12,
    d_v=8,
    min_span=2,
    max_span=5,
    composition_types=("verb-noun", "adj-noun"),
)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SMALL, seed=3)


def _pairs(event, name):
    a, b = COMPOSITION_TYPES[name]
    return event.slot(a), event.slot(b)


def test_split_sizes_and_shapes(corpus):
    assert len(corpus.samples[Split.TRAIN]) == SMALL.n_train
    for split in (Split.TEST_TRIVIAL, Split.NOVEL_COMPOSITION, Split.NOVEL_WORD):
        assert len(corpus.samples[split]) == SMALL.n_test
    for sample in corpus.all_samples():
        assert sample.features.shape == (SMALL.T, SMALL.d_v)
        assert SMALL.min_span <= sample.span.length <= SMALL.max_span
        assert sample.span.end <= SMALL.T
        assert sample.query.query_id == sample.sample_id
        assert len(sample.distractors) == SMALL.n_distractors


def test_train_never_sees_held_out_words_or_pairs(corpus):
    held_words = {w for words in corpus.held_out_words.values() for w in words}
    for sample in corpus.samples[Split.TRAIN]:
        assert not held_words & set(sample.query.tokens)
        for name in SMALL.composition_types:
            assert _pairs(sample.event, name) not in set(corpus.held_out_pairs[name])


def test_novel_composition_uses_held_out_pairs_of_seen_words(corpus):
    held_words = {w for words in corpus.held_out_words.values() for w in words}
    for sample in corpus.samples[Split.NOVEL_COMPOSITION]:
        assert sample.composition_type in SMALL.composition_types
        assert _pairs(sample.event, sample.composition_type) in set(corpus.held_out_pairs[sample.composition_type])
        assert not held_words & set(sample.query.tokens)


def test_novel_word_contains_a_held_out_word(corpus):
    held_words = {w for words in corpus.held_out_words.values() for w in words}
    for sample in corpus.samples[Split.NOVEL_WORD]:
        assert held_words & set(sample.query.tokens)


def test_trivial_pairs_were_seen_in_train(corpus):
    seen = {name: {_pairs(s.event, name) for s in corpus.samples[Split.TRAIN]} for name in SMALL.composition_types}
    for sample in corpus.samples[Split.TEST_TRIVIAL]:
        for name in SMALL.composition_types:
            assert _pairs(sample.event, name) in seen[name]


def test_queries_follow_the_template(corpus):
    sample = corpus.samples[Split.TRAIN][0]
    tokens = sample.query.tokens
    assert tokens[0] == "person" and tokens[3] == "the" and tokens[7] == "the"
    assert sample.query.subject_index == 0
    assert corpus.parse_event(tokens) == sample.event
    assert set(tokens) <= set(corpus.vocabulary())


def test_in_span_clips_carry_the_event(corpus):
    sample = corpus.samples[Split.TRAIN][1]
    event = corpus.event_embedding(sample.event)
    inside = sample.features[sample.span.start:sample.span.end].mean(axis=0)
    assert np.linalg.norm(inside - event) < 3 * SMALL.noise_sigma * np.sqrt(SMALL.d_v)


def test_generation_is_deterministic():
    first, second = gen_corpus(SMALL, seed=9), gen_corpus(SMALL, seed=9)
    for a, b in zip(first.all_samples(), second.all_samples()):
        assert a.sample_id == b.sample_id
        assert a.query.tokens == b.query.tokens
        np.testing.assert_array_equal(a.features, b.features)
    other = gen_corpus(SMALL, seed=10)
    assert any(
        a.query.tokens != b.query.tokens for a, b in zip(first.all_samples(), other.all_samples())
    )


def test_semantic_overlap():
    event = EventTuple(verb=0, object_noun=1, adjective=2, preposition=3, second_noun=4, adverb=5)
    assert semantic_overlap(event, event) == pytest.approx(1.0)
    different = EventTuple(verb=9, object_noun=8, adjective=7, preposition=6, second_noun=5, adverb=4)
    assert semantic_overlap(event, different) == pytest.approx(0.0)
    verb_swapped = EventTuple(verb=7, object_noun=1, adjective=2, preposition=3, second_noun=4, adverb=5)
    assert semantic_overlap(event, verb_swapped) == pytest.approx(0.8)
    one_noun = EventTuple(verb=0, object_noun=9, adjective=2, preposition=3, second_noun=4, adverb=5)
    assert semantic_overlap(event, one_noun) == pytest.approx(0.9)


def test_semantic_overlap_custom_weights():
    event = EventTuple(verb=0, object_noun=1, adjective=2, preposition=3, second_noun=4, adverb=5)
    verb_swapped = EventTuple(verb=7, object_noun=1, adjective=2, preposition=3, second_noun=4, adverb=5)
    weights = {"VERB": 0.6, "NOUN": 0.1, "ADJ": 0.1, "PREP": 0.1, "ADV": 0.1}
    assert semantic_overlap(event, verb_swapped, weights) == pytest.approx(0.4)
    with pytest.raises(BadWeights):
        semantic_overlap(event, event, {"VERB": 0.5, "NOUN": 0.1, "ADJ": 0.1, "PREP": 0.1, "ADV": 0.1})
    with pytest.raises(BadWeights):
        semantic_overlap(event, event, {"VERB": 1.2, "NOUN": -0.2, "ADJ": 0.0, "PREP": 0.0, "ADV": 0.0})
    with pytest.raises(BadWeights):
        semantic_overlap(event, event, {"VERB": 1.0})


def test_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(composition_types=("verb-colour",))
    assert SynthConfig(composition_types="verb-noun, prep-noun").composition_types == ("verb-noun", "prep-noun")
    with pytest.raises(InsufficientVocab):
        gen_corpus(SynthConfig(vocab_per_class=500, n_train=4, n_test=1))


def test_write_and_load_round_trip(corpus, tmp_path):
    write_corpus(corpus, tmp_path / "corpus")
    loaded = load_corpus(tmp_path / "corpus")
    assert loaded.config == corpus.config
    assert loaded.vocab == corpus.vocab
    for a, b in zip(corpus.all_samples(), loaded.all_samples()):
        assert a.sample_id == b.sample_id
        assert a.split is b.split
        assert a.span == b.span
        assert a.event == b.event
        assert a.query.tokens == b.query.tokens
        np.testing.assert_allclose(a.features, b.features)
    assert set(loaded.vocab) == set(PRIMITIVE_CLASSES)
    assert PrimitiveClass.NOUN in loaded.held_out_words


def _event_of(corpus, tokens):
    """Event of a template-shaped query; words from outside the corpus vocabulary map to -1."""
    indices = {}
    for slot in SLOTS:
        words = corpus.vocab[SLOT_CLASS[slot]]
        word = tokens[SLOT_POSITION[slot]]
        indices[slot] = words.index(word) if word in words else -1
    return EventTuple(**indices)


def test_forged_negatives_lose_overlap_level_by_level(corpus):
    queries = [s.query for s in corpus.samples[Split.TRAIN]]
    hierarchies = forge_lexicon(queries, build_dictionary(queries), seed=4)
    for sample, hierarchy in zip(corpus.samples[Split.TRAIN], hierarchies):
        overlaps = [
            semantic_overlap(sample.event, _event_of(corpus, record.negative_text.split(" ")))
            for record in hierarchy.hn
        ]
        assert overlaps[0] < 1.0
        for (inner, outer), (a, b) in zip(zip(hierarchy.hn, hierarchy.hn[1:]), zip(overlaps, overlaps[1:])):
            if len(outer.masked_positions) > len(inner.masked_positions):
                assert a > b
            else:
                assert a >= b


def test_in_span_features_average_to_the_event_embedding():
    rng = np.random.default_rng(17)
    event = rng.normal(size=3)
    distractors = [rng.normal(size=3), rng.normal(size=3)]
    span, T, sigma, draws = ClipSpan(2, 5), 8, 0.3, 10_000
    total = np.zeros(3)
    for _ in range(draws):
        total += render_features(event, distractors, span, T, sigma, rng)[span.start:span.end].mean(axis=0)
    standard_error = sigma / np.sqrt(draws * len(range(span.start, span.end)))
    z = (total / draws - event) / standard_error
    # three-sigma acceptance region for the joint statistic
    assert float((z ** 2).sum()) < chi2.ppf(0.9973, df=3)

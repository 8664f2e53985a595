#!/usr/bin/env python3
"""
Mask planning, lexicon filling and the hierarchy forge.
"""

import asyncio

import pytest

from negrank.corpus import Filler, NegativeLevel, Split, load_negatives
from negrank.errors import BadRatios, BatchTooSmall, ExhaustedClass, NoPrimitives
from negrank.negforge import (
    LexiconFiller,
    build_hierarchy,
    check_ratios,
    fill_lexicon,
    forge,
    forge_lexicon,
    level_seed,
    mask_count,
    plan_masks,
    sample_easy_negative,
)
from negrank.synthgen import SynthConfig, gen_corpus
from negrank.tagger import PrimitiveClass, PrimitiveDictionary, TaggedQuery, TagLexicon, build_dictionary, tag_query

QUERIES = [
    "person puts the small cup down quickly",
    "person opens the red door slowly",
    "person takes the blue towel in the closet",
    "person puts the green cup on the table",
]


@pytest.fixture(scope="module")
def tagged():
    lexicon = TagLexicon.bundled()
    return [tag_query(text, lexicon, f"q{i}") for i, text in enumerate(QUERIES)]


@pytest.fixture(scope="module")
def dictionary(tagged):
    return build_dictionary(tagged)


def test_mask_count_rounds_half_up():
    assert mask_count(0.25, 5) == 1
    assert mask_count(0.5, 5) == 3
    assert mask_count(0.75, 5) == 4
    assert [mask_count(r, 10) for r in (0.1, 0.3, 0.5)] == [1, 3, 5]
    assert mask_count(0.1, 2) == 1


def test_plan_follows_importance_order(tagged):
    # person0 puts1 the2 small3 cup4 down5 quickly6
    q = tagged[0]
    assert q.subject_index == 0
    first = plan_masks(q, 0.25)
    assert first.masked_positions == (1,)
    assert first.masked_classes == (PrimitiveClass.VERB,)
    second = plan_masks(q, 0.5)
    assert second.masked_positions == (1, 4, 3)
    assert second.masked_classes == (PrimitiveClass.VERB, PrimitiveClass.NOUN, PrimitiveClass.ADJ)


def test_hierarchy_counts_and_nesting(tagged):
    plans = build_hierarchy(tagged[0], (0.25, 0.5, 0.75))
    assert [p.count for p in plans] == [1, 3, 4]
    assert [p.level for p in plans] == [NegativeLevel.HN1, NegativeLevel.HN2, NegativeLevel.HN3]
    for inner, outer in zip(plans, plans[1:]):
        assert set(inner.masked_positions) <= set(outer.masked_positions)
    assert 0 not in plans[2].masked_positions


def test_subject_is_masked_only_when_nothing_else_is_left():
    q = TaggedQuery(
        query_id="solo",
        tokens=("person", "the"),
        tags=(PrimitiveClass.NOUN, PrimitiveClass.OTHER),
        subject_index=0,
    )
    assert plan_masks(q, 0.25).masked_positions == (0,)


def test_excluded_classes_are_never_masked(tagged):
    plans = build_hierarchy(tagged[0], (0.25, 0.5, 0.75), excluded_classes=[PrimitiveClass.VERB])
    for plan in plans:
        assert PrimitiveClass.VERB not in plan.masked_classes
    assert plans[0].masked_classes == (PrimitiveClass.NOUN,)


def test_query_without_primitives(tagged):
    lexicon = TagLexicon.bundled()
    with pytest.raises(NoPrimitives):
        plan_masks(tag_query("the a", lexicon, "empty"), 0.5)


@pytest.mark.parametrize("ratios", [(0.5, 0.3, 0.7), (0.25, 0.5), (0.0, 0.5, 0.75), (0.25, 0.5, 1.0), (0.3, 0.3, 0.5)])
def test_bad_ratios(ratios):
    with pytest.raises(BadRatios):
        check_ratios(ratios)


def test_fill_replaces_with_other_same_class_words(tagged, dictionary):
    for q in tagged:
        for plan in build_hierarchy(q):
            record = fill_lexicon(plan, q, dictionary, level_seed(3, q.query_id, plan.level))
            assert record.filler is Filler.LEXICON
            assert record.level is plan.level
            assert sorted(record.replacements) == sorted(plan.masked_positions)
            tokens = record.negative_text.split(" ")
            assert len(tokens) == len(q.tokens)
            for position, (old, new) in enumerate(zip(q.tokens, tokens)):
                if position in plan.masked_positions:
                    assert new != old
                    assert dictionary.contains(new, plan.class_at(position))
                else:
                    assert new == old


def test_fill_is_deterministic(tagged, dictionary):
    q = tagged[2]
    plan = build_hierarchy(q)[2]
    first = fill_lexicon(plan, q, dictionary, level_seed(7, q.query_id, plan.level))
    second = fill_lexicon(plan, q, dictionary, level_seed(7, q.query_id, plan.level))
    assert first.negative_text == second.negative_text
    weighted = fill_lexicon(plan, q, dictionary, level_seed(7, q.query_id, plan.level), weighted=True)
    assert len(weighted.replacements) == plan.count


def test_fill_exhausted_class(tagged):
    q = tagged[0]
    only_puts = PrimitiveDictionary(entries={PrimitiveClass.VERB: [("puts", 4)]})
    with pytest.raises(ExhaustedClass):
        fill_lexicon(plan_masks(q, 0.25), q, only_puts, 0)


def test_easy_negative_comes_from_the_rest_of_the_batch():
    batch = ["a", "b", "c"]
    for seed in range(20):
        assert sample_easy_negative(batch, 1, seed) in {"a", "c"}
    with pytest.raises(BatchTooSmall):
        sample_easy_negative(["a"], 0, 0)


def test_forge_builds_one_hierarchy_per_query(tagged, dictionary, tmp_path):
    cache = tmp_path / "negatives.jsonl"
    hierarchies = forge_lexicon(tagged, dictionary, seed=5, cache_path=cache)
    assert [h.query_id for h in hierarchies] == [q.query_id for q in tagged]
    for hierarchy in hierarchies:
        assert hierarchy.easy != hierarchy.query_id
        assert hierarchy.easy in {q.query_id for q in tagged}
        assert len(set(hierarchy.texts())) >= 2
        assert hierarchy.texts()[0] == hierarchy.positive.text
    assert len(load_negatives(cache)) == 3 * len(tagged)


def test_forge_reuses_the_cache(tagged, dictionary, tmp_path):
    cache = tmp_path / "negatives.jsonl"
    first = forge_lexicon(tagged, dictionary, seed=5, cache_path=cache)
    # a different seed would draw different words; cached records win
    second = forge_lexicon(tagged, dictionary, seed=99, cache_path=cache)
    assert [h.texts() for h in first] == [h.texts() for h in second]
    assert len(load_negatives(cache)) == 3 * len(tagged)


class CountingFiller(LexiconFiller):
    def __init__(self, dictionary):
        super().__init__(dictionary)
        self.calls = 0

    async def fill(self, plan, q, seed):
        self.calls += 1
        return await super().fill(plan, q, seed)


def _reworded(queries):
    """Same ids and tags, different wording outside the primitive slots."""
    return [
        TaggedQuery(q.query_id, tuple("a" if token == "the" else token for token in q.tokens), q.tags, q.subject_index)
        for q in queries
    ]


def _unmasked(tokens, positions):
    return [token for i, token in enumerate(tokens) if i not in positions]


def test_cache_of_other_queries_is_regenerated(tagged, dictionary, tmp_path):
    cache = tmp_path / "negatives.jsonl"
    forge_lexicon(tagged, dictionary, seed=5, cache_path=cache)
    reworded = _reworded(tagged)
    filler = CountingFiller(dictionary)
    hierarchies = asyncio.run(forge(reworded, filler, seed=5, cache_path=cache))
    assert filler.calls == 3 * len(reworded)
    for hierarchy, q in zip(hierarchies, reworded):
        for record in hierarchy.hn:
            tokens = record.negative_text.split(" ")
            assert _unmasked(tokens, record.masked_positions) == _unmasked(q.tokens, record.masked_positions)
    records = load_negatives(cache)
    assert len(records) == 3 * len(reworded)
    assert {r.negative_text for r in records} == {r.negative_text for h in hierarchies for r in h.hn}


def test_stale_entries_are_regenerated_only_once(tagged, dictionary, tmp_path):
    cache = tmp_path / "negatives.jsonl"
    forge_lexicon(tagged, dictionary, seed=5, cache_path=cache)
    reworded = _reworded(tagged)
    first = asyncio.run(forge(reworded, CountingFiller(dictionary), seed=5, cache_path=cache))
    again = CountingFiller(dictionary)
    second = asyncio.run(forge(reworded, again, seed=5, cache_path=cache))
    assert again.calls == 0
    assert [h.texts() for h in first] == [h.texts() for h in second]


def test_forge_is_deterministic_without_cache(tagged, dictionary):
    first = forge_lexicon(tagged, dictionary, seed=11)
    second = forge_lexicon(tagged, dictionary, seed=11)
    assert [h.texts() for h in first] == [h.texts() for h in second]
    assert [h.easy for h in first] == [h.easy for h in second]


def test_forge_needs_a_batch(tagged, dictionary):
    with pytest.raises(BatchTooSmall):
        forge_lexicon(tagged[:1], dictionary)


def test_forged_synthetic_queries_keep_every_invariant():
    corpus = gen_corpus(SynthConfig(n_train=200, n_test=1, T=8, d_v=2, min_span=2, max_span=4), seed=1)
    queries = [s.query for s in corpus.samples[Split.TRAIN]]
    dictionary = build_dictionary(queries)
    hierarchies = forge_lexicon(queries, dictionary, seed=2)
    assert len(hierarchies) == 200
    for hierarchy in hierarchies:
        q = hierarchy.positive
        levels = [set(record.masked_positions) for record in hierarchy.hn]
        assert levels[0] <= levels[1] <= levels[2]
        for record in hierarchy.hn:
            tokens = record.negative_text.split(" ")
            assert len(tokens) == len(q.tokens)
            for position, (old, new) in enumerate(zip(q.tokens, tokens)):
                if position in record.masked_positions:
                    assert new != old
                    assert dictionary.contains(new, q.tags[position])
                else:
                    assert new == old

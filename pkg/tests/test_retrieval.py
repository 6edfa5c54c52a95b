"""Search, ranking metrics, entity handling and attention read-outs."""

import numpy as np
import pytest

from nir.corpus import SynthConfig, gen_synthetic
from nir.encoders import AttentionMap
from nir.model import ModelConfig
from nir.retrieval import (
    attention_scores,
    build_index,
    evaluate_bidirectional,
    median_rank,
    normalize_entity,
    rank_of,
    recall_at_k,
    search,
    suggest_entities,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def small_index(entities=None):
    rows = np.stack([
        unit([1.0, 0.0, 0.0]),
        unit([0.8, 0.6, 0.0]),
        unit([0.0, 1.0, 0.0]),
        unit([0.0, 0.0, 1.0]),
    ])
    ids = ["img-a", "img-b", "img-c", "img-d"]
    return build_index(ids, rows, entities or {})


class TestNormalizeEntity:
    def test_case_and_accents(self):
        assert normalize_entity("Café") == "cafe"
        assert normalize_entity("CAFE") == "cafe"
        assert normalize_entity("Zürich") == "zurich"
        assert normalize_entity("Straße") == "strasse"

    def test_compatibility_forms(self):
        assert normalize_entity("ﬁlm") == "film"  # ligature decomposes


class TestSearch:
    def test_ordering_by_score(self):
        idx = small_index()
        hits = search(idx, unit([1.0, 0.1, 0.0]), k=4)
        assert [h.id for h in hits] == ["img-a", "img-b", "img-c", "img-d"]
        assert all(hits[i].score >= hits[i + 1].score for i in range(3))

    def test_k_truncates(self):
        idx = small_index()
        assert len(search(idx, unit([1.0, 0.0, 0.0]), k=2)) == 2
        assert len(search(idx, unit([1.0, 0.0, 0.0]), k=99)) == 4

    def test_score_ties_break_by_ascending_id(self):
        rows = np.stack([unit([1.0, 0.0]), unit([1.0, 0.0]), unit([0.0, 1.0])])
        idx = build_index(["img-z", "img-a", "img-m"], rows)
        hits = search(idx, unit([1.0, 0.0]), k=3)
        assert [h.id for h in hits] == ["img-a", "img-z", "img-m"]

    def test_entity_filter_requires_all(self):
        ents = {
            "img-a": ("Berlin", "Messi"),
            "img-b": ("Berlin",),
            "img-c": ("Messi",),
        }
        idx = small_index(ents)
        q = unit([1.0, 0.5, 0.2])  # scores img-b above img-a
        assert [h.id for h in search(idx, q, 4, entities=["Berlin"])] == ["img-b", "img-a"]
        assert [h.id for h in search(idx, q, 4, entities=["Berlin", "Messi"])] == ["img-a"]
        assert search(idx, q, 4, entities=["Paris"]) == []

    def test_entity_filter_is_normalized(self):
        idx = small_index({"img-a": ("Café",)})
        q = unit([1.0, 0.0, 0.0])
        assert [h.id for h in search(idx, q, 4, entities=["cafe"])] == ["img-a"]
        idx2 = small_index({"img-a": ("Cafe",)})
        assert [h.id for h in search(idx2, q, 4, entities=["CAFÉ"])] == ["img-a"]

    def test_hits_carry_raw_entities(self):
        idx = small_index({"img-a": ("Café",)})
        (hit, *_) = search(idx, unit([1.0, 0.0, 0.0]), k=1)
        assert hit.entities == ("Café",)

    def test_zero_query_rejected(self):
        idx = small_index()
        with pytest.raises(ValueError, match="empty query"):
            search(idx, np.zeros(3), k=1)

    def test_dim_and_k_validation(self):
        idx = small_index()
        with pytest.raises(ValueError):
            search(idx, np.ones(4), k=1)
        with pytest.raises(ValueError):
            search(idx, unit([1, 0, 0]), k=0)

    def test_index_validation(self):
        with pytest.raises(ValueError, match="unique"):
            build_index(["a", "a"], np.eye(2))
        with pytest.raises(ValueError, match="unit"):
            build_index(["a", "b"], np.array([[2.0, 0.0], [0.0, 1.0]]))
        # Zero rows are allowed (articles with no text).
        build_index(["a", "b"], np.array([[0.0, 0.0], [0.0, 1.0]]))


class TestRanks:
    def test_rank_basic(self):
        scores = np.array([0.9, 0.5, 0.7])
        assert rank_of(scores, 0) == 1
        assert rank_of(scores, 2) == 2
        assert rank_of(scores, 1) == 3

    def test_rank_is_pessimistic_about_ties(self):
        scores = np.array([0.5, 0.5, 0.5, 0.1])
        assert rank_of(scores, 0) == 3
        assert rank_of(scores, 2) == 3

    def test_recall(self):
        ranks = [1, 2, 11, 5, 100]
        assert recall_at_k(ranks, 1) == 0.2
        assert recall_at_k(ranks, 10) == 0.6
        with pytest.raises(ValueError):
            recall_at_k([], 10)

    def test_median_odd_and_even(self):
        assert median_rank([3, 1, 7]) == 3.0
        assert median_rank([1, 2, 3, 10]) == 2.5
        assert median_rank([4]) == 4.0
        with pytest.raises(ValueError):
            median_rank([])


@pytest.fixture(scope="module")
def trained():
    from nir.encoders import EncoderConfig
    from nir.textprep import EmbeddingTable
    from nir.training import TrainConfig, train_single_source

    out = gen_synthetic(
        SynthConfig(topics=4, samples_per_lang=40, vocab_per_topic=8,
                    embed_dim=8, feature_dim=12),
        seed=0,
    )
    store = out.store()
    tables = {}
    for lang, vecs in out.word_vecs.items():
        t = EmbeddingTable(lang, 8, buckets=64, bank_seed=1)
        toks = list(vecs)
        t.add_tokens(toks, np.stack([vecs[k] for k in toks]))
        tables[lang] = t
    cfg = ModelConfig(
        sources=("caption",),
        fuse_strategy="attention",
        languages=("de", "fr"),
        encoder=EncoderConfig(embed_dim=8, heads=2, key_dim=4, value_dim=4,
                              hidden_dim=16, out_dim=8),
        feature_dim=12,
    )
    de = [r for r in out.samples if r.lang == "de"]
    fr = [r for r in out.samples if r.lang == "fr"]
    train, val = de[:30] + fr[:30], de[30:] + fr[30:]
    tcfg = TrainConfig(epochs=1, batch_size=16, schedule=((0, 1e-3),))
    result = train_single_source(train, store, val, "caption", cfg, tables, tcfg)
    return result.model, val, store


class TestEvaluate:
    def test_report_shape(self, trained):
        model, val, store = trained
        report = evaluate_bidirectional(model, val, store)
        assert set(report.per_lang) == {"de", "fr"}
        for dirs in report.per_lang.values():
            assert set(dirs) == {"t2i", "i2t"}
            for m in dirs.values():
                assert set(m.recall) == {1, 5, 10}
                assert all(0.0 <= v <= 1.0 for v in m.recall.values())
                assert m.med_rank >= 1.0

    def test_r10_sum_adds_all_directions(self, trained):
        model, val, store = trained
        report = evaluate_bidirectional(model, val, store)
        manual = sum(
            dirs[d].recall[10] for dirs in report.per_lang.values() for d in ("t2i", "i2t")
        )
        assert report.r10_sum() == manual

    def test_pools_are_per_language(self, trained):
        model, val, store = trained
        samples = [r for r in val if r.lang == "de"][:6] + [
            r for r in val if r.lang == "fr"
        ][:4]
        report = evaluate_bidirectional(model, samples, store)
        assert report.per_lang["de"]["t2i"].count == 6
        assert report.per_lang["fr"]["t2i"].count == 4

    def test_to_json_round_trips_structure(self, trained):
        import json

        model, val, store = trained
        report = evaluate_bidirectional(model, val, store)
        blob = json.loads(json.dumps(report.to_json()))
        assert blob["de"]["t2i"]["recall"]["10"] == report.per_lang["de"]["t2i"].recall[10]

    def test_too_few_samples(self, trained):
        model, val, store = trained
        with pytest.raises(ValueError):
            evaluate_bidirectional(model, val[:1], store)


class TestAttentionScores:
    def test_column_means_sum_to_one(self):
        rng = np.random.default_rng(0)
        maps = []
        for _ in range(3):
            logits = rng.standard_normal((5, 5))
            e = np.exp(logits)
            maps.append(e / e.sum(axis=1, keepdims=True))
        scores = attention_scores(AttentionMap(maps))
        assert scores.shape == (5,)
        assert abs(scores.sum() - 1.0) < 1e-12
        want = np.mean(np.stack(maps), axis=0).mean(axis=0)
        np.testing.assert_allclose(scores, want, atol=1e-12)

    def test_empty_map(self):
        assert attention_scores(AttentionMap([])).shape == (0,)

    def test_uniform_rows_give_uniform_scores(self):
        maps = [np.full((4, 4), 0.25)]
        np.testing.assert_allclose(attention_scores(AttentionMap(maps)), np.full(4, 0.25))


class TestSuggestEntities:
    VOCAB = ["Berlin", "New York", "Café", "Angela Merkel"]

    def test_single_token_match(self):
        texts = {"caption": "ein tag in berlin", "body": ""}
        assert suggest_entities(texts, self.VOCAB) == ["Berlin"]

    def test_phrase_must_be_contiguous(self):
        hit = {"caption": "flug nach new york gebucht"}
        miss = {"caption": "new strecke nach york"}
        assert suggest_entities(hit, self.VOCAB) == ["New York"]
        assert suggest_entities(miss, self.VOCAB) == []

    def test_normalization_applies_both_ways(self):
        texts = {"caption": "im CAFE um die ecke"}
        assert suggest_entities(texts, self.VOCAB) == ["Café"]
        texts = {"caption": "treffen mit angela merkel heute"}
        assert suggest_entities(texts, self.VOCAB) == ["Angela Merkel"]

    def test_results_sorted_and_unique(self):
        texts = {"caption": "berlin berlin", "body": "cafe in berlin"}
        got = suggest_entities(texts, self.VOCAB + ["berlin"])
        assert got == sorted(got)
        assert len([e for e in got if normalize_entity(e) == "berlin"]) == 2

    def test_empty_inputs(self):
        assert suggest_entities({}, self.VOCAB) == []
        assert suggest_entities({"caption": "nichts passendes hier"}, []) == []

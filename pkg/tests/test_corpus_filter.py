import json
import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artlab import synthetic
from artlab.corpus import (
    DEFAULT_CAPTION_EXCLUSION_TERMS,
    CorpusRecord,
    FilterConfig,
    FilterStats,
    Verdict,
    embedding_filter,
    keyword_filter,
    run_filter_pipeline,
)
from artlab.errors import ConfigError
from artlab.fileio import read_jsonl, write_jsonl
from artlab.words import word_tokenize


def oracle_whole_token_match(caption: str, term: str) -> bool:
    """Independent check: strip punctuation, split, scan for the term phrase."""
    table = str.maketrans({c: " " for c in string.punctuation})
    tokens = caption.lower().translate(table).split()
    term_tokens = term.lower().translate(table).split()
    n = len(term_tokens)
    return any(tokens[i : i + n] == term_tokens for i in range(len(tokens) - n + 1))


class StubScorer:
    """Deterministic scorer mapping mean pixel intensity to a concept score."""

    def __init__(self, weight: float = 100.0):
        self.weight = weight

    def score(self, images, texts):
        rows = [[float(np.mean(im)) * self.weight] * len(texts) for im in images]
        return np.asarray(rows)


# ---------------------------------------------------------------------------
# keyword stage


def test_keyword_rejects_painting_from_default_list():
    verdict = keyword_filter("A painting of a dog on a wall", DEFAULT_CAPTION_EXCLUSION_TERMS)
    assert verdict == Verdict(accept=False, term="painting")


def test_keyword_accepts_plain_caption():
    assert keyword_filter("A dog running on grass", DEFAULT_CAPTION_EXCLUSION_TERMS).accept


def test_keyword_art_inside_party_is_not_a_match():
    # Oracle agrees: "art" is not a whole token of "party".
    caption = "A lively party with balloons"
    assert not oracle_whole_token_match(caption, "art")
    assert keyword_filter(caption, DEFAULT_CAPTION_EXCLUSION_TERMS).accept


def test_keyword_matches_multi_token_phrase():
    verdict = keyword_filter("an art deco lamp on a desk", ["art deco"])
    assert verdict == Verdict(accept=False, term="art deco")
    assert keyword_filter("an artistic deco lamp", ["art deco"]).accept


def test_keyword_empty_caption_accepts():
    assert keyword_filter("", DEFAULT_CAPTION_EXCLUSION_TERMS).accept


def test_keyword_is_case_and_punctuation_insensitive():
    verdict = keyword_filter("Wonderful ART!", DEFAULT_CAPTION_EXCLUSION_TERMS)
    assert verdict == Verdict(accept=False, term="art")


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(codec="ascii"), max_size=80))
def test_keyword_agrees_with_oracle_on_arbitrary_text(caption):
    terms = ["art", "painting", "pop art", "stamp"]
    verdict = keyword_filter(caption, terms)
    oracle_reject = any(oracle_whole_token_match(caption, t) for t in terms)
    assert verdict.accept == (not oracle_reject)
    if not verdict.accept:
        assert oracle_whole_token_match(caption, verdict.term)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.sampled_from(["dog", "party", "smart", "painting", "art", "meadow", "startled"]),
        min_size=1, max_size=10,
    )
)
def test_token_safety_for_retained_captions(words):
    caption = " ".join(words)
    verdict = keyword_filter(caption, DEFAULT_CAPTION_EXCLUSION_TERMS)
    if verdict.accept:
        tokens = set(word_tokenize(caption))
        assert not any(
            t in tokens for t in DEFAULT_CAPTION_EXCLUSION_TERMS if " " not in t
        )


def test_monotonicity_adding_term_never_increases_retained(rng):
    captions = [
        " ".join(rng.choice(["dog", "cat", "meadow", "stamp", "party", "lake"], size=5))
        for _ in range(50)
    ]
    base_terms = ["stamp"]
    retained_base = sum(keyword_filter(c, base_terms).accept for c in captions)
    retained_more = sum(keyword_filter(c, base_terms + ["dog"]).accept for c in captions)
    assert retained_more <= retained_base


# ---------------------------------------------------------------------------
# embedding stage


def _record(tmp_path, img_value: float, rec_id="r0"):
    img = np.full((8, 8, 3), img_value, dtype=np.float32)
    path = tmp_path / f"{rec_id}.png"
    synthetic.save_image(img, path)
    return CorpusRecord(id=rec_id, image_path=str(path), caption="x")


def test_embedding_filter_threshold_crossing(tmp_path):
    class FixedScorer:
        def score(self, images, texts):
            return np.asarray([[18.2]] * len(images))

    config = FilterConfig(
        image_concepts=["painting"], per_concept_threshold={"painting": 17.0}, image_size=8
    )
    # Score 18.2 on "painting" with threshold 17 -> reject, score reported.
    verdict = embedding_filter(_record(tmp_path, 0.5), config, FixedScorer())
    assert not verdict.accept
    assert verdict.concept == "painting"
    assert verdict.score == 18.2


def test_embedding_filter_below_threshold_accepts(tmp_path):
    config = FilterConfig(
        image_concepts=["painting"], per_concept_threshold={"painting": 17.0}, image_size=8
    )
    verdict = embedding_filter(_record(tmp_path, 0.05), config, StubScorer())
    assert verdict.accept


def test_embedding_filter_reports_highest_scoring_concept(tmp_path):
    class TwoConceptScorer:
        def score(self, images, texts):
            return np.asarray([[18.0, 25.0]] * len(images))

    config = FilterConfig(
        image_concepts=["painting", "stamp"],
        per_concept_threshold={"painting": 17.0, "stamp": 17.0},
        image_size=8,
    )
    verdict = embedding_filter(_record(tmp_path, 0.5), config, TwoConceptScorer())
    assert (verdict.concept, verdict.score) == ("stamp", 25.0)


def test_missing_threshold_is_a_config_error(tmp_path):
    config = FilterConfig(image_concepts=["painting"], image_size=8)
    with pytest.raises(ConfigError):
        embedding_filter(_record(tmp_path, 0.5), config, StubScorer())


def test_filter_config_validation():
    with pytest.raises(ConfigError):
        FilterConfig(caption_exclusion_terms=[])
    with pytest.raises(ConfigError):
        FilterConfig(image_concepts=[])
    with pytest.raises(ConfigError):
        FilterConfig(per_concept_threshold={"painting": float("nan")})


# ---------------------------------------------------------------------------
# pipeline


def _write_corpus(tmp_path, n=20, dark_art=6):
    """Dark images (mean ~0.8) play 'art'; bright-capped ones are natural."""
    records = []
    for i in range(n):
        is_art = i < dark_art
        value = 0.8 if is_art else 0.1
        img = np.full((8, 8, 3), value, dtype=np.float32)
        rel = f"images/r{i}.png"
        synthetic.save_image(img, tmp_path / rel)
        caption = "a painting of a lake" if (is_art and i % 2 == 0) else "a quiet lake shore"
        records.append({"id": f"r{i}", "image_path": rel, "caption": caption, "split": "train"})
    manifest = tmp_path / "manifest.jsonl"
    write_jsonl(manifest, records)
    return manifest


def _config():
    return FilterConfig(
        image_concepts=["painting"], per_concept_threshold={"painting": 50.0}, image_size=8
    )


def test_pipeline_stats_conservation_and_order(tmp_path):
    manifest = _write_corpus(tmp_path)
    out, stats = run_filter_pipeline(manifest, _config(), StubScorer())
    stats.check()
    assert stats.total == 20
    assert stats.rejected_by_caption == 3   # art ids 0, 2, 4 have "painting" captions
    assert stats.rejected_by_embedding == 3  # dark ids 1, 3, 5 caught by score
    assert stats.retained == 14
    kept = read_jsonl(out)
    assert [r["id"] for r in kept] == [f"r{i}" for i in range(6, 20)]


def test_pipeline_idempotent(tmp_path):
    manifest = _write_corpus(tmp_path)
    out1, stats1 = run_filter_pipeline(manifest, _config(), StubScorer())
    out2, stats2 = run_filter_pipeline(out1, _config(), StubScorer(),
                                       manifest_out=tmp_path / "second.jsonl")
    assert stats2.retained == stats1.retained
    assert stats2.rejected_by_caption == 0 and stats2.rejected_by_embedding == 0
    assert [r["id"] for r in read_jsonl(out2)] == [r["id"] for r in read_jsonl(out1)]


def test_pipeline_deterministic_across_batch_sizes(tmp_path):
    manifest = _write_corpus(tmp_path)
    out1, stats1 = run_filter_pipeline(manifest, _config(), StubScorer(),
                                       manifest_out=tmp_path / "a.jsonl", batch_size=3)
    out2, stats2 = run_filter_pipeline(manifest, _config(), StubScorer(),
                                       manifest_out=tmp_path / "b.jsonl", batch_size=64)
    assert out1.read_bytes() == out2.read_bytes()
    assert stats1.to_dict() == stats2.to_dict()


def test_pipeline_empty_manifest(tmp_path):
    manifest = tmp_path / "empty.jsonl"
    manifest.write_text("")
    out, stats = run_filter_pipeline(manifest, _config(), StubScorer())
    assert stats.to_dict() == FilterStats().to_dict()
    assert read_jsonl(out) == []


def test_pipeline_missing_manifest_is_fatal(tmp_path):
    with pytest.raises(ConfigError):
        run_filter_pipeline(tmp_path / "nope.jsonl", _config(), StubScorer())


def test_pipeline_quarantines_unreadable_images(tmp_path):
    manifest = _write_corpus(tmp_path, n=10, dark_art=0)
    records = read_jsonl(manifest)
    records.append({"id": "broken", "image_path": "images/missing.png",
                    "caption": "a quiet lake", "split": "train"})
    write_jsonl(manifest, records)
    out, stats = run_filter_pipeline(manifest, _config(), StubScorer())
    stats.check()
    assert stats.quarantined == 1
    assert stats.total == 11
    quarantine = read_jsonl(out.with_name(out.stem + ".quarantine.jsonl"))
    assert quarantine[0]["id"] == "broken"


def test_stats_table_renders():
    stats = FilterStats(total=5, rejected_by_caption=1, rejected_by_embedding=1,
                        retained=3, per_concept_rejections={"painting": 1})
    table = stats.render_table()
    assert "retained" in table and "painting" in table

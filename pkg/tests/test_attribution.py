import numpy as np
import pytest

from artlab import synthetic
from artlab.attribution import (
    METHOD_FEATURES,
    METHOD_GRADIENTS,
    CorpusIndex,
    attribute,
    build_index,
    read_index,
    write_index,
)
from artlab.errors import ConfigError, UnindexedCorpusError
from artlab.evaluation import ConvFeatureStack
from artlab.fileio import sha256_file, write_jsonl


@pytest.fixture(scope="module")
def extractor():
    return ConvFeatureStack(channels=(8, 16, 32), seed=0)


def _make_corpus(tmp_path, prefix, n, seed, styled=False, size=32):
    rng = np.random.default_rng(seed)
    records, images = [], []
    for i in range(n):
        spec = synthetic.sample_scene_spec(rng)
        img = synthetic.render_scene(rng, spec, size=size)
        if styled:
            img = synthetic.posterize_palette(img)
        rel = f"{prefix}/img{i}.png"
        synthetic.save_image(img, tmp_path / rel)
        records.append({"id": f"{prefix}{i}", "image_path": rel,
                        "caption": spec.caption, "split": "train"})
        images.append(img)
    manifest = tmp_path / f"{prefix}.jsonl"
    write_jsonl(manifest, records)
    return manifest, records, images


@pytest.fixture()
def corpora(tmp_path, extractor):
    nat_manifest, nat_records, nat_images = _make_corpus(tmp_path, "nat", 12, seed=0)
    ex_manifest, ex_records, ex_images = _make_corpus(tmp_path, "exm", 12, seed=1, styled=True)
    nat_index = build_index(nat_manifest, extractor, tmp_path / "nat.alidx")
    ex_index = build_index(ex_manifest, extractor, tmp_path / "exm.alidx")
    return {
        "natural": CorpusIndex("natural-corpus", str(nat_manifest), str(nat_index)),
        "exemplar": CorpusIndex("exemplar-set", str(ex_manifest), str(ex_index)),
        "nat_images": nat_images,
        "ex_images": ex_images,
        "nat_records": nat_records,
        "ex_records": ex_records,
    }


def test_build_index_empty_manifest(tmp_path, extractor):
    manifest = tmp_path / "empty.jsonl"
    manifest.write_text("")
    path = build_index(manifest, extractor, tmp_path / "empty.alidx")
    header, features = read_index(path)
    assert header["count"] == 0 and features.shape[0] == 0


def test_reindex_is_byte_identical(tmp_path, extractor):
    manifest, _, _ = _make_corpus(tmp_path, "c", 6, seed=3)
    path = tmp_path / "c.alidx"
    build_index(manifest, extractor, path)
    first = sha256_file(path)
    build_index(manifest, extractor, path)  # incremental rebuild, no changes
    assert sha256_file(path) == first


def test_index_lookup_matches_direct_extraction(tmp_path, extractor):
    manifest, records, _ = _make_corpus(tmp_path, "c", 6, seed=4)
    path = build_index(manifest, extractor, tmp_path / "c.alidx")
    header, features = read_index(path)
    # Oracle: extract directly from the stored image files.
    stored = [synthetic.load_image(tmp_path / r["image_path"], size=32) for r in records]
    direct = extractor.content_vectors(stored)
    assert header["ids"] == [r["id"] for r in records]
    assert np.max(np.abs(features - direct)) < 1e-6


def test_index_quarantines_missing_images(tmp_path, extractor):
    manifest, records, _ = _make_corpus(tmp_path, "c", 4, seed=5)
    records.append({"id": "ghost", "image_path": "c/ghost.png",
                    "caption": "a quiet lake", "split": "train"})
    write_jsonl(manifest, records)
    path = build_index(manifest, extractor, tmp_path / "c.alidx")
    header, _ = read_index(path)
    assert header["quarantined"] == ["ghost"]
    assert "ghost" not in header["ids"]


def test_unindexed_corpus_raises(tmp_path, extractor, rng):
    corpus = CorpusIndex("natural-corpus", "whatever.jsonl", str(tmp_path / "missing.alidx"))
    query = rng.random((32, 32, 3)).astype(np.float32)
    with pytest.raises(UnindexedCorpusError):
        attribute(query, {}, [corpus], feature_extractor=extractor)


def test_extractor_fingerprint_mismatch_rejected(tmp_path, extractor, rng):
    manifest, _, _ = _make_corpus(tmp_path, "c", 4, seed=6)
    path = build_index(manifest, extractor, tmp_path / "c.alidx")
    other = ConvFeatureStack(channels=(8, 16, 32), seed=99)
    corpus = CorpusIndex("natural-corpus", str(manifest), str(path))
    query = rng.random((32, 32, 3)).astype(np.float32)
    with pytest.raises(ConfigError):
        attribute(query, {}, [corpus], feature_extractor=other)


def test_exact_duplicate_ranks_first(corpora, extractor):
    query = corpora["nat_images"][7]
    result = attribute(query, {"query_id": "q"},
                       [corpora["natural"], corpora["exemplar"]],
                       method=METHOD_FEATURES, k=5, feature_extractor=extractor)
    assert result.items[0].image_id == "nat7"
    assert result.items[0].source == "natural-corpus"
    assert result.items[0].score == pytest.approx(1.0, abs=1e-6)
    assert result.method == METHOD_FEATURES


def test_near_duplicate_ranks_top3(corpora, extractor):
    rng = np.random.default_rng(42)
    for target in (2, 5, 9):
        noisy = np.clip(
            corpora["nat_images"][target] + rng.normal(0, 0.05,
                                                       corpora["nat_images"][target].shape),
            0, 1,
        ).astype(np.float32)
        result = attribute(noisy, {}, [corpora["natural"], corpora["exemplar"]],
                           method=METHOD_FEATURES, k=3, feature_extractor=extractor)
        assert f"nat{target}" in [it.image_id for it in result.items]


def test_scores_monotone_and_sources_correct(corpora, extractor):
    query = corpora["ex_images"][0]
    result = attribute(query, {}, [corpora["natural"], corpora["exemplar"]],
                       method=METHOD_FEATURES, k=10, feature_extractor=extractor)
    scores = [it.score for it in result.items]
    assert scores == sorted(scores, reverse=True)
    nat_ids = {r["id"] for r in corpora["nat_records"]}
    ex_ids = {r["id"] for r in corpora["ex_records"]}
    for item in result.items:
        if item.source == "natural-corpus":
            assert item.image_id in nat_ids
        else:
            assert item.source == "exemplar-set" and item.image_id in ex_ids


def test_attribution_deterministic(corpora, extractor):
    query = corpora["nat_images"][3]
    a = attribute(query, {}, [corpora["natural"]], k=5, feature_extractor=extractor)
    b = attribute(query, {}, [corpora["natural"]], k=5, feature_extractor=extractor)
    assert a.to_dict() == b.to_dict()


def test_k_validation(corpora, extractor, rng):
    query = rng.random((32, 32, 3)).astype(np.float32)
    with pytest.raises(ConfigError):
        attribute(query, {}, [corpora["natural"]], k=0, feature_extractor=extractor)
    with pytest.raises(ConfigError):
        attribute(query, {}, [corpora["natural"]], method="mystery",
                  feature_extractor=extractor)


def test_write_read_index_roundtrip(tmp_path, rng):
    features = rng.random((5, 7)).astype(np.float32)
    header = {"extractor_fingerprint": "x", "dim": 7, "count": 5,
              "ids": [f"r{i}" for i in range(5)], "quarantined": []}
    write_index(tmp_path / "t.alidx", header, features)
    got_header, got_features = read_index(tmp_path / "t.alidx")
    assert got_header == header
    assert np.array_equal(got_features, features)


def test_gradient_influence_runs_on_micro_model(micro_model, tmp_path):
    manifest, records, images = _make_corpus(tmp_path, "m", 4, seed=7, size=8)
    corpus = CorpusIndex("natural-corpus", str(manifest), str(tmp_path / "unused.alidx"))
    states_before = [p.requires_grad for p in micro_model.unet.parameters()]
    query = images[1]
    result = attribute(
        query, {"prompt": records[1]["caption"]}, [corpus],
        method=METHOD_GRADIENTS, k=3, model=micro_model, image_size=8,
    )
    assert result.method == METHOD_GRADIENTS
    assert len(result.items) == 3
    scores = [it.score for it in result.items]
    assert scores == sorted(scores, reverse=True)
    # requires_grad states restored exactly as they were.
    assert [p.requires_grad for p in micro_model.unet.parameters()] == states_before

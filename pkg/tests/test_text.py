import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from artlab.errors import ConfigError
from artlab.text import (
    RESERVED_TOKENS,
    StyleSuffixWarning,
    TextEncoder,
    TextEncoderConfig,
    assert_text_only_provenance,
    compose_style_prompt,
)

CAPTIONS = [
    "a photo of a meadow with rocks and bushes",
    "a quiet lake scene showing reeds near waves",
    "a wide desert with dunes under a sunset sky",
]


@pytest.fixture(scope="module")
def encoder():
    return TextEncoder.from_captions(CAPTIONS, embed_dim=32, max_tokens=12, context_layers=0)


def test_same_prompt_twice_identical(encoder):
    a = encoder.encode_prompt("a photo of a meadow")
    b = encoder.encode_prompt("a photo of a meadow")
    assert torch.equal(a.embeddings, b.embeddings)
    assert a.token_ids == b.token_ids


def test_empty_prompt_is_null(encoder):
    cond = encoder.encode_prompt("")
    assert cond.is_null
    assert all(i == encoder.pad_id for i in cond.token_ids)
    assert torch.isfinite(cond.embeddings).all()


def test_overlong_prompt_truncates_with_flag(encoder):
    prompt = " ".join(["rocks"] * 40)
    with pytest.warns(UserWarning, match="truncated"):
        cond = encoder.encode_prompt(prompt)
    assert cond.truncated
    assert len(cond.token_ids) == encoder.config.max_tokens


def test_style_token_differs_only_at_its_position(encoder):
    # Non-contextual probe configuration: single embedding row changes.
    a = encoder.encode_prompt("a photo of sks rocks")
    b = encoder.encode_prompt("a photo of meadow rocks")
    diff = (a.embeddings - b.embeddings).abs().sum(dim=1)
    changed = torch.nonzero(diff > 0).flatten().tolist()
    assert changed == [3]


def test_detokenize_preserves_style_token(encoder):
    ids, _ = encoder.tokenize("a meadow in the style of sks art")
    assert "sks" in encoder.detokenize(ids).split()


def test_style_token_resolves_to_single_vocab_id(encoder):
    token = encoder.style_token("sks")
    assert token.surface_form == "sks"
    assert encoder.config.vocab[token.vocabulary_id] == "sks"


def test_unknown_or_multiword_style_token_rejected(encoder):
    with pytest.raises(ConfigError):
        encoder.style_token("zzzunknown")
    with pytest.raises(ConfigError):
        encoder.style_token("two words")


def test_token_override_changes_only_that_row(encoder):
    token = encoder.style_token("sks")
    new_vec = torch.ones(encoder.config.embed_dim) * 0.5
    plain = encoder.encode_prompt("a photo of sks rocks")
    swapped = encoder.encode_prompt(
        "a photo of sks rocks", token_overrides={token.vocabulary_id: new_vec}
    )
    diff = (plain.embeddings - swapped.embeddings).abs().sum(dim=1)
    assert torch.nonzero(diff > 0).flatten().tolist() == [3]


def test_compose_style_prompt_exact_suffix(encoder):
    token = encoder.style_token("sks")
    assert compose_style_prompt("A dog", token) == "A dog in the style of sks art"


def test_compose_style_prompt_twice_is_flagged(encoder):
    token = encoder.style_token("sks")
    once = compose_style_prompt("A dog", token)
    with pytest.warns(StyleSuffixWarning):
        twice = compose_style_prompt(once, token)
    assert twice == once


def test_compose_style_prompt_requires_content(encoder):
    token = encoder.style_token("sks")
    with pytest.raises(ConfigError):
        compose_style_prompt("", token)


def test_provenance_gate():
    config = TextEncoderConfig(vocab=list(RESERVED_TOKENS) + ["dog"],
                               weight_provenance="contrastive-image-text")
    with pytest.raises(ConfigError):
        assert_text_only_provenance(config)
    with pytest.raises(ConfigError):
        TextEncoder(config)


def test_save_load_roundtrip(tmp_path, encoder):
    path = tmp_path / "text.pt"
    encoder.save(path)
    loaded = TextEncoder.load(path)
    a = encoder.encode_prompt("a photo of a meadow")
    b = loaded.encode_prompt("a photo of a meadow")
    assert torch.equal(a.embeddings, b.embeddings)


def test_contextual_encoder_is_deterministic():
    enc = TextEncoder.from_captions(CAPTIONS, embed_dim=32, max_tokens=12,
                                    context_layers=2, n_heads=4)
    a = enc.encode_prompt("a quiet lake scene")
    b = enc.encode_prompt("a quiet lake scene")
    assert torch.equal(a.embeddings, b.embeddings)


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=200))
def test_tokenize_always_yields_fixed_length_valid_ids(text):
    enc = TextEncoder.from_captions(CAPTIONS, embed_dim=16, max_tokens=8)
    ids, _ = enc.tokenize(text)
    assert len(ids) == 8
    assert all(0 <= i < len(enc.config.vocab) for i in ids)

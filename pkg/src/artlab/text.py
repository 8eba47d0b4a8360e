"""Language-only prompt encoder with a pseudo-token slot for style learning.

The encoder never sees pixels: embeddings come from a word-level
vocabulary table plus optional self-attention context layers, all
initialized from a seed (or trained on text alone). Provenance metadata
travels with the weights so "no visual leakage" is checkable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .fileio import sha256_bytes
from .words import build_vocab, word_tokenize

PAD, UNK = "<pad>", "<unk>"
RESERVED_TOKENS = (PAD, UNK, "sks")
STYLE_SUFFIX_TEMPLATE = "{content} in the style of {token} art"

TEXT_ONLY_PROVENANCES = {"random-init-text-only", "trained-text-only"}


class StyleSuffixWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StyleToken:
    surface_form: str
    vocabulary_id: int
    embedding: torch.Tensor = field(repr=False)


@dataclass
class Conditioning:
    prompt_text: str
    token_ids: list[int]
    embeddings: torch.Tensor  # (max_tokens, dim)
    is_null: bool = False
    truncated: bool = False


@dataclass
class TextEncoderConfig:
    vocab: list[str]
    embed_dim: int = 64
    max_tokens: int = 24
    context_layers: int = 0
    n_heads: int = 4
    seed: int = 0
    weight_provenance: str = "random-init-text-only"

    def __post_init__(self):
        if self.vocab[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise ConfigError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")

    def to_dict(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "embed_dim": self.embed_dim,
            "max_tokens": self.max_tokens,
            "context_layers": self.context_layers,
            "n_heads": self.n_heads,
            "seed": self.seed,
            "weight_provenance": self.weight_provenance,
        }


def assert_text_only_provenance(config: TextEncoderConfig) -> None:
    if config.weight_provenance not in TEXT_ONLY_PROVENANCES:
        raise ConfigError(
            f"text encoder provenance {config.weight_provenance!r} is not a known "
            f"text-only source: {sorted(TEXT_ONLY_PROVENANCES)}"
        )


def _sinusoidal_positions(n_positions: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_positions, dtype=torch.float32)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        assert_text_only_provenance(config)
        self.config = config
        self.token_to_id = {tok: i for i, tok in enumerate(config.vocab)}
        torch.manual_seed(config.seed)
        self.embedding = nn.Embedding(len(config.vocab), config.embed_dim)
        self.register_buffer(
            "positions", _sinusoidal_positions(config.max_tokens, config.embed_dim)
        )
        self.context = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=config.embed_dim,
                nhead=config.n_heads,
                dim_feedforward=config.embed_dim * 2,
                batch_first=True,
                dropout=0.0,
            )
            for _ in range(config.context_layers)
        )
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_captions(cls, captions, **kwargs) -> "TextEncoder":
        vocab = build_vocab(captions, reserved=RESERVED_TOKENS)
        return cls(TextEncoderConfig(vocab=vocab, **kwargs))

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    def tokenize(self, prompt: str) -> tuple[list[int], bool]:
        """Token ids padded to max_tokens; second value flags truncation."""
        words = word_tokenize(prompt)
        truncated = len(words) > self.config.max_tokens
        words = words[: self.config.max_tokens]
        ids = [self.token_to_id.get(w, self.token_to_id[UNK]) for w in words]
        ids += [self.pad_id] * (self.config.max_tokens - len(ids))
        return ids, truncated

    def detokenize(self, token_ids) -> str:
        words = [self.config.vocab[int(i)] for i in token_ids]
        return " ".join(w for w in words if w != PAD)

    def _embed_ids(
        self, ids: torch.Tensor, token_overrides: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        emb = self.embedding(ids)
        if token_overrides:
            for vocab_id, vector in token_overrides.items():
                mask = ids == vocab_id
                if mask.any():
                    emb = torch.where(mask[..., None], vector.to(emb.dtype), emb)
        emb = emb + self.positions[: ids.shape[-1]]
        for layer in self.context:
            emb = layer(emb)
        return emb

    def encode_prompt(
        self, prompt: str, token_overrides: dict[int, torch.Tensor] | None = None
    ) -> Conditioning:
        """Deterministic token-level embeddings for one prompt.

        ``token_overrides`` substitutes the table row for chosen vocabulary
        ids before context layers run; that is how a learnable pseudo-token
        is probed without touching the frozen table.
        """
        if prompt:
            ids, truncated = self.tokenize(prompt)
            if truncated:
                warnings.warn(f"prompt truncated to {self.config.max_tokens} tokens")
        else:
            ids, truncated = [self.pad_id] * self.config.max_tokens, False
        ids_t = torch.as_tensor(ids, dtype=torch.long)
        emb = self._embed_ids(ids_t[None], token_overrides)[0]
        return Conditioning(
            prompt_text=prompt,
            token_ids=ids,
            embeddings=emb,
            is_null=(prompt == ""),
            truncated=truncated,
        )

    def encode_batch(
        self, prompts: list[str], token_overrides: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        ids = torch.as_tensor([self.tokenize(p)[0] for p in prompts], dtype=torch.long)
        return self._embed_ids(ids, token_overrides)

    def style_token(self, surface_form: str = "sks") -> StyleToken:
        words = word_tokenize(surface_form)
        if len(words) != 1 or words[0] not in self.token_to_id:
            raise ConfigError(
                f"style token {surface_form!r} must map to exactly one vocabulary entry"
            )
        vocab_id = self.token_to_id[words[0]]
        if vocab_id == self.token_to_id[UNK]:
            raise ConfigError(f"style token {surface_form!r} is unknown to the vocabulary")
        return StyleToken(
            surface_form=words[0],
            vocabulary_id=vocab_id,
            embedding=self.embedding.weight[vocab_id].detach().clone(),
        )

    def fingerprint(self) -> str:
        blobs = [p.detach().numpy().tobytes() for _, p in sorted(self.state_dict().items())]
        return sha256_bytes(b"".join(blobs))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": "artlab-text-encoder-v1",
                "config": self.config.to_dict(),
                "state": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "TextEncoder":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        encoder = cls(TextEncoderConfig(**payload["config"]))
        encoder.load_state_dict(payload["state"])
        encoder.eval()
        return encoder


def compose_style_prompt(content: str, token: StyleToken) -> str:
    """Append the style suffix; warns and leaves the prompt alone if already styled."""
    if not content:
        raise ConfigError("content prompt must be non-empty")
    suffix = f" in the style of {token.surface_form} art"
    if content.endswith(suffix):
        warnings.warn(f"prompt already carries the style suffix: {content!r}", StyleSuffixWarning)
        return content
    return content + suffix

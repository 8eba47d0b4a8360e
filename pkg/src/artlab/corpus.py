"""Two-stage art filtering of an image-caption corpus.

Stage one rejects captions containing excluded terms as whole tokens (or
whole multi-token phrases). Stage two scores each surviving image against
a list of art concepts with an image-text scorer and rejects anything
crossing its per-concept threshold. Unreadable images are quarantined,
never silently dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fileio import read_jsonl, write_jsonl
from .synthetic import load_image
from .words import word_tokenize

# Terms excluded from captions (whole-token / whole-phrase matches).
DEFAULT_CAPTION_EXCLUSION_TERMS = [
    "painting", "paintings", "art", "artwork", "drawings", "sketch",
    "sketches", "illustration", "illustrations", "sculpture", "sculptures",
    "stamp", "stamps", "advertisement", "advertisements", "logo", "logos",
    "installation", "printmaking", "digital art", "conceptual art", "mosaic",
    "tapestry", "abstract", "realism", "surrealism", "impressionism",
    "expressionism", "cubism", "minimalism", "baroque", "rococo", "pop art",
    "art nouveau", "art deco", "futurism", "dadaism",
]

# Concepts scored against each image.
DEFAULT_IMAGE_CONCEPTS = [
    "painting", "art", "artwork", "drawing", "sketch", "illustration",
    "sculpture", "stamp", "advertisement", "logo", "installation art",
    "printmaking art", "digital art", "conceptual art", "mosaic art",
    "tapestry", "abstract art", "realism art", "surrealism art",
    "impressionism art", "expressionism art", "cubism art", "minimalism art",
    "baroque art", "rococo art", "pop art", "art nouveau", "art deco",
    "futurism art", "dadaism art",
]


@dataclass(frozen=True)
class Verdict:
    accept: bool
    term: str | None = None
    concept: str | None = None
    score: float | None = None

    def to_dict(self) -> dict:
        out = {"accept": self.accept}
        if self.term is not None:
            out["term"] = self.term
        if self.concept is not None:
            out["concept"] = self.concept
            out["score"] = self.score
        return out


@dataclass
class CorpusRecord:
    id: str
    image_path: str
    caption: str
    split: str = "train"
    keyword_verdict: Verdict | None = None
    embedding_verdict: Verdict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusRecord":
        return cls(
            id=str(data["id"]),
            image_path=str(data["image_path"]),
            caption=str(data["caption"]),
            split=str(data.get("split", "train")),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "caption": self.caption,
            "split": self.split,
        }


@dataclass
class FilterConfig:
    caption_exclusion_terms: list[str] = field(
        default_factory=lambda: list(DEFAULT_CAPTION_EXCLUSION_TERMS)
    )
    image_concepts: list[str] = field(default_factory=lambda: list(DEFAULT_IMAGE_CONCEPTS))
    per_concept_threshold: dict[str, float] = field(default_factory=dict)
    image_size: int = 32
    scorer_path: str | None = None

    def __post_init__(self):
        if not self.caption_exclusion_terms:
            raise ConfigError("caption_exclusion_terms must be non-empty")
        if not self.image_concepts:
            raise ConfigError("image_concepts must be non-empty")
        self.caption_exclusion_terms = [t.lower() for t in self.caption_exclusion_terms]
        for concept in self.image_concepts:
            thr = self.per_concept_threshold.get(concept)
            if thr is not None and not np.isfinite(thr):
                raise ConfigError(f"threshold for {concept!r} must be finite")

    def threshold(self, concept: str) -> float:
        if concept not in self.per_concept_threshold:
            raise ConfigError(f"no threshold calibrated for concept {concept!r}")
        return float(self.per_concept_threshold[concept])

    @classmethod
    def from_dict(cls, data: dict) -> "FilterConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "caption_exclusion_terms": list(self.caption_exclusion_terms),
            "image_concepts": list(self.image_concepts),
            "per_concept_threshold": dict(self.per_concept_threshold),
            "image_size": self.image_size,
            "scorer_path": self.scorer_path,
        }


@dataclass
class FilterStats:
    total: int = 0
    rejected_by_caption: int = 0
    rejected_by_embedding: int = 0
    retained: int = 0
    quarantined: int = 0
    per_concept_rejections: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        rejections = self.rejected_by_caption + self.rejected_by_embedding + self.quarantined
        if self.total != rejections + self.retained:
            raise AssertionError(f"inconsistent stats: {self}")

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "rejected_by_caption": self.rejected_by_caption,
            "rejected_by_embedding": self.rejected_by_embedding,
            "retained": self.retained,
            "quarantined": self.quarantined,
            "per_concept_rejections": dict(sorted(self.per_concept_rejections.items())),
        }

    def render_table(self) -> str:
        rows = [
            ("total", self.total),
            ("rejected by caption", self.rejected_by_caption),
            ("rejected by embedding", self.rejected_by_embedding),
            ("quarantined", self.quarantined),
            ("retained", self.retained),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {count:>7d}" for name, count in rows]
        if self.per_concept_rejections:
            lines.append("")
            lines.append("rejections per concept:")
            for concept, count in sorted(self.per_concept_rejections.items()):
                lines.append(f"  {concept:<20} {count:>5d}")
        return "\n".join(lines)


def keyword_filter(caption: str, terms: list[str]) -> Verdict:
    """Reject iff any term matches a whole token (or token phrase) of the caption.

    Terms are checked in list order and the first match is reported, so
    "art" inside "party" never fires but the phrase "pop art" does.
    """
    tokens = word_tokenize(caption)
    if not tokens:
        return Verdict(accept=True)
    token_set = set(tokens)
    for term in terms:
        term_tokens = word_tokenize(term)
        if not term_tokens:
            continue
        if len(term_tokens) == 1:
            if term_tokens[0] in token_set:
                return Verdict(accept=False, term=term)
        else:
            n = len(term_tokens)
            for i in range(len(tokens) - n + 1):
                if tokens[i : i + n] == term_tokens:
                    return Verdict(accept=False, term=term)
    return Verdict(accept=True)


def embedding_filter(record: CorpusRecord, config: FilterConfig, scorer, *, root=None) -> Verdict:
    """Reject iff the image crosses any concept threshold; worst offender reported.

    Raises OSError (or PIL's errors) when the image is unreadable; the
    pipeline turns that into a quarantine entry.
    """
    path = Path(record.image_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    img = load_image(path, size=config.image_size)
    scores = scorer.score([img], config.image_concepts)[0]
    return _verdict_from_scores(scores, config)


def _verdict_from_scores(scores: np.ndarray, config: FilterConfig) -> Verdict:
    worst_concept, worst_score = None, -np.inf
    for concept, score in zip(config.image_concepts, scores):
        if score >= config.threshold(concept) and score > worst_score:
            worst_concept, worst_score = concept, float(score)
    if worst_concept is None:
        return Verdict(accept=True)
    return Verdict(accept=False, concept=worst_concept, score=worst_score)


def run_filter_pipeline(
    manifest_in,
    config: FilterConfig,
    scorer,
    *,
    manifest_out=None,
    stats_path=None,
    quarantine_path=None,
    batch_size: int = 64,
) -> tuple[Path, FilterStats]:
    """Apply both stages to a manifest, preserving input order.

    Writes the filtered manifest, a structured stats report, and (when any
    image is unreadable) a quarantine manifest next to the output.
    """
    manifest_in = Path(manifest_in)
    records = [CorpusRecord.from_dict(d) for d in read_jsonl(manifest_in)]
    root = manifest_in.parent
    if manifest_out is None:
        manifest_out = manifest_in.with_name(manifest_in.stem + ".filtered.jsonl")
    manifest_out = Path(manifest_out)

    stats = FilterStats(total=len(records))
    survivors: list[CorpusRecord] = []
    quarantine: list[dict] = []

    pending: list[CorpusRecord] = []
    for record in records:
        record.keyword_verdict = keyword_filter(record.caption, config.caption_exclusion_terms)
        if record.keyword_verdict.accept:
            pending.append(record)
        else:
            stats.rejected_by_caption += 1

    # Stage two in batches; scoring is vectorized but order is preserved.
    accepted: list[CorpusRecord] = []
    for start in range(0, len(pending), batch_size):
        batch = pending[start : start + batch_size]
        images, readable = [], []
        for record in batch:
            path = root / record.image_path
            try:
                images.append(load_image(path, size=config.image_size))
                readable.append(record)
            except (OSError, ValueError) as exc:
                stats.quarantined += 1
                quarantine.append({**record.to_dict(), "reason": str(exc)})
        if not readable:
            continue
        score_matrix = scorer.score(images, config.image_concepts)
        for record, scores in zip(readable, score_matrix):
            record.embedding_verdict = _verdict_from_scores(scores, config)
            if record.embedding_verdict.accept:
                accepted.append(record)
            else:
                stats.rejected_by_embedding += 1
                concept = record.embedding_verdict.concept
                stats.per_concept_rejections[concept] = (
                    stats.per_concept_rejections.get(concept, 0) + 1
                )
    survivors = accepted
    stats.retained = len(survivors)
    stats.check()

    # Keep image paths valid from the output manifest's own directory.
    out_root = manifest_out.parent.resolve()

    def rebased(record: CorpusRecord) -> dict:
        data = record.to_dict()
        path = Path(record.image_path)
        if not path.is_absolute():
            data["image_path"] = os.path.relpath((root / path).resolve(), out_root)
        return data

    write_jsonl(manifest_out, [rebased(r) for r in survivors])
    if quarantine or quarantine_path is not None:
        if quarantine_path is None:
            quarantine_path = manifest_out.with_name(manifest_out.stem + ".quarantine.jsonl")
        write_jsonl(quarantine_path, quarantine)
    if stats_path is not None:
        Path(stats_path).parent.mkdir(parents=True, exist_ok=True)
        Path(stats_path).write_text(
            json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
    return manifest_out, stats

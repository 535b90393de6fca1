"""TF-IDF retrieval over an MCQ corpus.

Weighting is pinned so independent implementations agree exactly:
``weight(t, d) = tf(t, d) * idf(t)`` with raw-count tf and
``idf(t) = ln(N / df(t)) + 1``; similarity is the cosine between sparse
vectors. Documents are the question text concatenated with all option
texts (the correct answer is not indexed separately). No stemming, no
stop words.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .corpus import McqRecord
from .errors import ValidationError

INDEX_FORMAT_VERSION = 1

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased maximal runs of Unicode alphanumerics."""
    return [m.group(0) for m in _TOKEN.finditer(text.lower())]


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: int
    score: float
    record: McqRecord


@dataclass(frozen=True)
class TfidfIndex:
    vocabulary: dict[str, int]
    document_frequency: dict[int, int]
    doc_vectors: tuple[dict[int, float], ...]
    doc_norms: tuple[float, ...]
    corpus: tuple[McqRecord, ...]

    @property
    def n_documents(self) -> int:
        return len(self.corpus)

    def idf(self, term_id: int) -> float:
        return math.log(self.n_documents / self.document_frequency[term_id]) + 1.0


def document_text(record: McqRecord) -> str:
    return " ".join([record.question, *(text for _, text in record.options)])


def build_index(corpus: list[McqRecord]) -> TfidfIndex:
    if not corpus:
        raise ValidationError("cannot build an index over an empty corpus")
    vocabulary: dict[str, int] = {}
    term_counts: list[dict[int, int]] = []
    for record in corpus:
        counts: dict[int, int] = {}
        for term in tokenize(document_text(record)):
            term_id = vocabulary.setdefault(term, len(vocabulary))
            counts[term_id] = counts.get(term_id, 0) + 1
        term_counts.append(counts)
    document_frequency: dict[int, int] = {}
    for counts in term_counts:
        for term_id in counts:
            document_frequency[term_id] = document_frequency.get(term_id, 0) + 1
    n = len(corpus)
    doc_vectors = []
    doc_norms = []
    for counts in term_counts:
        vector = {
            term_id: tf * (math.log(n / document_frequency[term_id]) + 1.0)
            for term_id, tf in counts.items()
        }
        doc_vectors.append(vector)
        doc_norms.append(math.sqrt(sum(w * w for w in vector.values())))
    return TfidfIndex(
        vocabulary=vocabulary,
        document_frequency=document_frequency,
        doc_vectors=tuple(doc_vectors),
        doc_norms=tuple(doc_norms),
        corpus=tuple(corpus),
    )


def query(index: TfidfIndex, text: str, k: int = 1) -> list[RetrievalHit]:
    """Top-k documents by cosine similarity; zero-score documents pad to k.

    Query terms absent from the index vocabulary are dropped. Ties break by
    ascending doc_id.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    counts: dict[int, int] = {}
    for term in tokenize(text):
        term_id = index.vocabulary.get(term)
        if term_id is not None:
            counts[term_id] = counts.get(term_id, 0) + 1
    q_vector = {term_id: tf * index.idf(term_id) for term_id, tf in counts.items()}
    q_norm = math.sqrt(sum(w * w for w in q_vector.values()))
    scores = [0.0] * len(index.doc_vectors)
    if q_norm > 0.0:
        for doc_id, (vector, norm) in enumerate(zip(index.doc_vectors, index.doc_norms)):
            if norm == 0.0:
                continue
            dot = sum(weight * vector.get(term_id, 0.0) for term_id, weight in q_vector.items())
            scores[doc_id] = min(1.0, max(0.0, dot / (q_norm * norm)))
    order = sorted(range(len(scores)), key=lambda d: (-scores[d], d))
    return [RetrievalHit(doc_id=d, score=scores[d], record=index.corpus[d]) for d in order[:k]]


def save_index(index: TfidfIndex, path: str | Path) -> None:
    payload = {
        "format_version": INDEX_FORMAT_VERSION,
        "vocabulary": index.vocabulary,
        "document_frequency": {str(k): v for k, v in index.document_frequency.items()},
        "doc_vectors": [{str(k): v for k, v in vec.items()} for vec in index.doc_vectors],
        "doc_norms": list(index.doc_norms),
        "corpus": [
            {"question": r.question, "options": dict(r.options), "answer": r.correct_label}
            for r in index.corpus
        ],
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> TfidfIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read index file {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != INDEX_FORMAT_VERSION:
        raise ValidationError(f"unsupported index format_version {version!r}")
    corpus = tuple(
        McqRecord(
            question=obj["question"],
            options=tuple((str(k), str(v)) for k, v in obj["options"].items()),
            correct_label=obj["answer"],
        )
        for obj in payload["corpus"]
    )
    return TfidfIndex(
        vocabulary={str(k): int(v) for k, v in payload["vocabulary"].items()},
        document_frequency={int(k): int(v) for k, v in payload["document_frequency"].items()},
        doc_vectors=tuple({int(k): float(v) for k, v in vec.items()} for vec in payload["doc_vectors"]),
        doc_norms=tuple(float(x) for x in payload["doc_norms"]),
        corpus=corpus,
    )

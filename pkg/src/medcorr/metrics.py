"""Evaluation: subtask accuracies, ROUGE, NA-aware composites, reports.

Tokenization is shared with retrieval (lowercased alphanumeric runs) so the
quality gate and the evaluation suite always agree. ROUGE-L is the plain
LCS F1 (beta = 1). Neural scorers (BERTScore, BLEURT) are never computed
natively; they plug in over HTTP via :class:`ExternalScorer`, and the
aggregate column appears only when all three of its components are present.

Composite scoring per corrected sentence: 1.0 when both sides are NA, 0.0
when exactly one side is NA, otherwise the base metric on the pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import requests

from .corpus import ClinicalRecord
from .errors import ValidationError
from .na import NAType, is_na
from .retrieval import tokenize

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1

AGGREGATE_COMPONENTS = ("rouge1_f", "bertscore", "bleurt")


class PredictionLike(Protocol):
    record_id: str
    flag: int
    error_sentence_id: int
    corrected_sentence: str | NAType


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Single-row dynamic program, O(len(a) * len(b)) time, O(len(b)) space.
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for x in a:
        prev_diag = 0
        for j, y in enumerate(b, start=1):
            prev_row = row[j]
            if x == y:
                row[j] = prev_diag + 1
            elif row[j - 1] > row[j]:
                row[j] = row[j - 1]
            prev_diag = prev_row
    return row[len(b)]


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_l_f(candidate: str, reference: str) -> float:
    """Token-level LCS F1; 0.0 when either side has no tokens."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def rouge1_f(candidate: str, reference: str) -> float:
    """Clipped unigram-overlap F1; 0.0 when either side has no tokens."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    ref_counts: dict[str, int] = {}
    for token in ref:
        ref_counts[token] = ref_counts.get(token, 0) + 1
    cand_counts: dict[str, int] = {}
    for token in cand:
        cand_counts[token] = cand_counts.get(token, 0) + 1
    matches = sum(min(count, ref_counts.get(token, 0)) for token, count in cand_counts.items())
    return _f1(matches / len(cand), matches / len(ref))


def composite_score(
    pred_correction: str | NAType,
    gold_correction: str | NAType,
    base: Callable[[str, str], float],
) -> float:
    pred_na = is_na(pred_correction)
    gold_na = is_na(gold_correction)
    if pred_na and gold_na:
        return 1.0
    if pred_na != gold_na:
        return 0.0
    return base(str(pred_correction), str(gold_correction))


def aggregate_score(components: Iterable[float]) -> float:
    values = list(components)
    if not values:
        raise ValidationError("aggregate_score needs at least one component")
    return sum(values) / len(values)


def _align(
    predictions: Sequence[PredictionLike],
    golds: Sequence[ClinicalRecord],
) -> list[tuple[PredictionLike, ClinicalRecord]]:
    gold_by_id = {g.record_id: g for g in golds}
    pred_ids = [p.record_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids):
        raise ValidationError("duplicate record_ids among predictions")
    if len(gold_by_id) != len(golds):
        raise ValidationError("duplicate record_ids among gold records")
    missing = sorted(gold_by_id.keys() - set(pred_ids))
    extra = sorted(set(pred_ids) - gold_by_id.keys())
    if missing or extra:
        raise ValidationError(
            f"prediction/gold record_id mismatch: missing from predictions {missing}, "
            f"not in gold {extra}"
        )
    for gold in golds:
        if not gold.labeled:
            raise ValidationError(f"gold record {gold.record_id!r} has no gold annotations")
    return [(p, gold_by_id[p.record_id]) for p in predictions]


def flag_accuracy(predictions: Sequence[PredictionLike], golds: Sequence[ClinicalRecord]) -> float:
    pairs = _align(predictions, golds)
    if not pairs:
        raise ValidationError("cannot score an empty record set")
    return sum(1 for p, g in pairs if p.flag == g.gold_flag) / len(pairs)


def sentence_accuracy(predictions: Sequence[PredictionLike], golds: Sequence[ClinicalRecord]) -> float:
    pairs = _align(predictions, golds)
    if not pairs:
        raise ValidationError("cannot score an empty record set")
    return sum(1 for p, g in pairs if p.error_sentence_id == g.gold_error_sentence_id) / len(pairs)


@dataclass(frozen=True)
class ExternalScorer:
    """HTTP plug-in returning one score in [0, 1] per (candidate, reference) pair.

    Wire format: ``POST {url}`` with ``{"pairs": [{"candidate": ...,
    "reference": ...}, ...]}``; response ``{"scores": [...]}``.
    """

    name: str
    url: str
    batch_size: int = 32
    timeout: float = 60.0

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        scores: list[float] = []
        for start in range(0, len(pairs), self.batch_size):
            batch = pairs[start : start + self.batch_size]
            body = {"pairs": [{"candidate": c, "reference": r} for c, r in batch]}
            http = requests.post(self.url, json=body, timeout=self.timeout)
            if http.status_code != 200:
                raise ValidationError(
                    f"external scorer {self.name!r} returned HTTP {http.status_code}: {http.text[:200]}"
                )
            batch_scores = http.json().get("scores")
            if not isinstance(batch_scores, list) or len(batch_scores) != len(batch):
                raise ValidationError(
                    f"external scorer {self.name!r} returned {len(batch_scores or [])} scores "
                    f"for {len(batch)} pairs"
                )
            for value in batch_scores:
                score = float(value)
                if not 0.0 <= score <= 1.0:
                    raise ValidationError(f"external scorer {self.name!r} score {score} out of [0, 1]")
                scores.append(score)
        return scores


@dataclass(frozen=True)
class RecordScores:
    record_id: str
    pred_flag: int
    gold_flag: int
    flag_correct: bool
    pred_sentence_id: int
    gold_sentence_id: int
    sentence_correct: bool
    base_scores: dict[str, float | None]
    composites: dict[str, float]


@dataclass(frozen=True)
class ScoreReport:
    n_records: int
    flag_accuracy: float
    sentence_accuracy: float
    mean_rouge1_f: float | None
    mean_rouge_l_f: float | None
    composite_means: dict[str, float]
    unavailable: tuple[str, ...]
    per_record: tuple[RecordScores, ...] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "n_records": self.n_records,
            "flag_accuracy": self.flag_accuracy,
            "sentence_accuracy": self.sentence_accuracy,
            "mean_rouge1_f": self.mean_rouge1_f,
            "mean_rouge_l_f": self.mean_rouge_l_f,
            "composite_means": dict(self.composite_means),
            "unavailable": list(self.unavailable),
            "per_record": [
                {
                    "record_id": row.record_id,
                    "pred_flag": row.pred_flag,
                    "gold_flag": row.gold_flag,
                    "flag_correct": row.flag_correct,
                    "pred_sentence_id": row.pred_sentence_id,
                    "gold_sentence_id": row.gold_sentence_id,
                    "sentence_correct": row.sentence_correct,
                    "base_scores": dict(row.base_scores),
                    "composites": dict(row.composites),
                }
                for row in self.per_record
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ScoreReport":
        version = payload.get("format_version")
        if version != REPORT_FORMAT_VERSION:
            raise ValidationError(f"unsupported report format_version {version!r}")
        try:
            rows = tuple(
                RecordScores(
                    record_id=row["record_id"],
                    pred_flag=int(row["pred_flag"]),
                    gold_flag=int(row["gold_flag"]),
                    flag_correct=bool(row["flag_correct"]),
                    pred_sentence_id=int(row["pred_sentence_id"]),
                    gold_sentence_id=int(row["gold_sentence_id"]),
                    sentence_correct=bool(row["sentence_correct"]),
                    base_scores=dict(row["base_scores"]),
                    composites=dict(row["composites"]),
                )
                for row in payload["per_record"]
            )
            return cls(
                n_records=int(payload["n_records"]),
                flag_accuracy=float(payload["flag_accuracy"]),
                sentence_accuracy=float(payload["sentence_accuracy"]),
                mean_rouge1_f=None if payload["mean_rouge1_f"] is None else float(payload["mean_rouge1_f"]),
                mean_rouge_l_f=None if payload["mean_rouge_l_f"] is None else float(payload["mean_rouge_l_f"]),
                composite_means=dict(payload["composite_means"]),
                unavailable=tuple(payload["unavailable"]),
                per_record=rows,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed score report: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"score report is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _composite_of(pred_na: bool, gold_na: bool, base_value: float | None) -> float:
    if pred_na and gold_na:
        return 1.0
    if pred_na != gold_na:
        return 0.0
    assert base_value is not None
    return base_value


def evaluate(
    predictions: Sequence[PredictionLike],
    golds: Sequence[ClinicalRecord],
    scorers: Sequence[ExternalScorer] = (),
    strict_scorers: bool = False,
) -> ScoreReport:
    """Score predictions against gold records across every subtask.

    External scorer failures mark that column unavailable (or abort when
    ``strict_scorers`` is set). The aggregate column is computed only when
    rouge1_f, bertscore, and bleurt are all present.
    """
    pairs = _align(predictions, golds)
    if not pairs:
        raise ValidationError("cannot evaluate an empty record set")

    non_na = [
        not is_na(pred.corrected_sentence) and not is_na(gold.gold_correction)
        for pred, gold in pairs
    ]
    scored_indices = [i for i, keep in enumerate(non_na) if keep]
    texts = [
        (str(pairs[i][0].corrected_sentence), str(pairs[i][1].gold_correction))
        for i in scored_indices
    ]

    external_scores: dict[str, dict[int, float]] = {}
    unavailable: list[str] = []
    for scorer in scorers:
        try:
            scores = scorer.score_pairs(texts)
        except (ValidationError, requests.RequestException) as exc:
            if strict_scorers:
                raise ValidationError(f"external scorer {scorer.name!r} failed: {exc}") from exc
            logger.warning("external scorer %r unavailable: %s", scorer.name, exc)
            unavailable.append(scorer.name)
            continue
        external_scores[scorer.name] = dict(zip(scored_indices, scores))

    with_aggregate = all(
        component == "rouge1_f" or component in external_scores for component in AGGREGATE_COMPONENTS
    )

    rows: list[RecordScores] = []
    for i, (pred, gold) in enumerate(pairs):
        pred_na = is_na(pred.corrected_sentence)
        gold_na = is_na(gold.gold_correction)
        candidate = str(pred.corrected_sentence)
        reference = str(gold.gold_correction)

        base_scores: dict[str, float | None] = {
            "rouge1_f": rouge1_f(candidate, reference) if non_na[i] else None,
            "rouge_l_f": rouge_l_f(candidate, reference) if non_na[i] else None,
        }
        for name, by_index in external_scores.items():
            base_scores[name] = by_index.get(i)
        if with_aggregate:
            base_scores["aggregate"] = (
                aggregate_score([base_scores[c] for c in AGGREGATE_COMPONENTS])  # type: ignore[misc]
                if non_na[i]
                else None
            )
        composites = {
            name: _composite_of(pred_na, gold_na, value) for name, value in base_scores.items()
        }

        rows.append(
            RecordScores(
                record_id=pred.record_id,
                pred_flag=pred.flag,
                gold_flag=gold.gold_flag,  # type: ignore[arg-type]
                flag_correct=pred.flag == gold.gold_flag,
                pred_sentence_id=pred.error_sentence_id,
                gold_sentence_id=gold.gold_error_sentence_id,  # type: ignore[arg-type]
                sentence_correct=pred.error_sentence_id == gold.gold_error_sentence_id,
                base_scores=base_scores,
                composites=composites,
            )
        )

    r1_values = [row.base_scores["rouge1_f"] for row in rows if row.base_scores["rouge1_f"] is not None]
    rl_values = [row.base_scores["rouge_l_f"] for row in rows if row.base_scores["rouge_l_f"] is not None]
    composite_means = {
        name: _mean([row.composites[name] for row in rows]) for name in rows[0].composites
    }
    return ScoreReport(
        n_records=len(rows),
        flag_accuracy=_mean([1.0 if row.flag_correct else 0.0 for row in rows]),
        sentence_accuracy=_mean([1.0 if row.sentence_correct else 0.0 for row in rows]),
        mean_rouge1_f=_mean(r1_values) if r1_values else None,  # type: ignore[arg-type]
        mean_rouge_l_f=_mean(rl_values) if rl_values else None,  # type: ignore[arg-type]
        composite_means=composite_means,
        unavailable=tuple(unavailable),
        per_record=tuple(rows),
    )

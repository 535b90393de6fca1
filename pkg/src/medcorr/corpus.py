"""Dataset ingestion: clinical records, MCQ retrieval corpora, splits.

Canonical on-disk formats (see README for the full schemas):

* clinical delimited-table: UTF-8 CSV with header
  ``record_id, text, sentences_json, error_flag, error_sentence_id,
  corrected_sentence`` where ``sentences_json`` is a JSON array of strings.
* clinical json-lines: one object per line with keys ``record_id``, ``text``,
  ``sentences`` (array of strings), ``error_flag``, ``error_sentence_id``,
  ``corrected_sentence``.
* MCQ json-lines: ``{"question": str, "options": {"A": str, ...},
  "answer": "A"}``.

Gold sentence segmentation is authoritative: records are never re-segmented.
"""

from __future__ import annotations

import csv
import io
import json
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import ValidationError
from .na import NA, NAType, is_na, na_to_text, text_to_na

CLINICAL_CSV_COLUMNS = (
    "record_id",
    "text",
    "sentences_json",
    "error_flag",
    "error_sentence_id",
    "corrected_sentence",
)


class Sentence(NamedTuple):
    sentence_id: int
    text: str


@dataclass(frozen=True)
class ClinicalRecord:
    """One clinical text split into numbered sentences plus gold annotations.

    Gold fields are ``None`` for unlabeled records. For labeled records the
    flag, error sentence id and correction are mutually consistent:
    flag 0 pairs with id -1 and an NA correction, flag 1 with an existing
    sentence id and a non-empty corrected sentence.
    """

    record_id: str
    sentences: tuple[Sentence, ...]
    gold_flag: int | None = None
    gold_error_sentence_id: int | None = None
    gold_correction: str | NAType | None = None

    def __post_init__(self) -> None:
        if not self.record_id:
            raise ValidationError("record_id must be non-empty")
        if not self.sentences:
            raise ValidationError(f"record {self.record_id!r}: no sentences")
        prev = -1
        for sid, text in self.sentences:
            if sid <= prev:
                raise ValidationError(
                    f"record {self.record_id!r}: sentence ids must be unique and strictly increasing"
                )
            if not text:
                raise ValidationError(f"record {self.record_id!r}: sentence {sid} is empty")
            prev = sid
        self._check_gold()

    def _check_gold(self) -> None:
        rid = self.record_id
        if self.gold_flag is None:
            if self.gold_error_sentence_id is not None or self.gold_correction is not None:
                raise ValidationError(
                    f"record {rid!r}: gold error id/correction given without an error flag"
                )
            return
        if self.gold_flag not in (0, 1):
            raise ValidationError(f"record {rid!r}: error_flag must be 0 or 1")
        if self.gold_flag == 0:
            if self.gold_error_sentence_id != -1:
                raise ValidationError(
                    f"record {rid!r}: flag 0 requires error_sentence_id -1, "
                    f"got {self.gold_error_sentence_id}"
                )
            if not is_na(self.gold_correction):
                raise ValidationError(f"record {rid!r}: flag 0 requires an NA correction")
        else:
            ids = {s.sentence_id for s in self.sentences}
            if self.gold_error_sentence_id not in ids:
                raise ValidationError(
                    f"record {rid!r}: error_sentence_id {self.gold_error_sentence_id} "
                    "does not reference an existing sentence"
                )
            if is_na(self.gold_correction) or not self.gold_correction:
                raise ValidationError(
                    f"record {rid!r}: flag 1 requires a non-empty corrected sentence"
                )

    @property
    def labeled(self) -> bool:
        return self.gold_flag is not None

    def full_text(self) -> str:
        return "\n".join(s.text for s in self.sentences)

    def sentence_text(self, sentence_id: int) -> str:
        for sid, text in self.sentences:
            if sid == sentence_id:
                return text
        raise ValidationError(f"record {self.record_id!r}: no sentence with id {sentence_id}")

    def sentence_ids(self) -> tuple[int, ...]:
        return tuple(s.sentence_id for s in self.sentences)


@dataclass(frozen=True)
class McqRecord:
    """A retrieval-corpus multiple-choice question."""

    question: str
    options: tuple[tuple[str, str], ...]
    correct_label: str

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValidationError("MCQ needs at least 2 options")
        labels = [label for label, _ in self.options]
        if len(set(labels)) != len(labels):
            raise ValidationError("MCQ option labels must be unique")
        if self.correct_label not in labels:
            raise ValidationError(
                f"MCQ answer {self.correct_label!r} is not among option labels {labels}"
            )

    @property
    def correct_text(self) -> str:
        for label, text in self.options:
            if label == self.correct_label:
                return text
        raise AssertionError("unreachable: validated in __post_init__")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[ClinicalRecord, ...]
    validation: tuple[ClinicalRecord, ...]
    test: tuple[ClinicalRecord, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        ids: list[str] = [r.record_id for part in (self.train, self.validation, self.test) for r in part]
        if len(set(ids)) != len(ids):
            raise ValidationError("split parts must be disjoint by record_id")


def _decode_utf8(raw: bytes | str) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"input is not valid UTF-8: {exc}") from exc


def _gold_fields(
    record_id: str,
    flag_text: str,
    error_id_text: str,
    correction_text: str,
) -> tuple[int | None, int | None, str | NAType | None]:
    if flag_text == "":
        if error_id_text not in ("", "-1") or correction_text not in ("", "NA"):
            raise ValidationError(
                f"record {record_id!r}: gold columns present but error_flag is empty"
            )
        return None, None, None
    try:
        flag = int(flag_text)
    except ValueError as exc:
        raise ValidationError(f"record {record_id!r}: error_flag {flag_text!r} is not an integer") from exc
    try:
        error_id = int(error_id_text)
    except ValueError as exc:
        raise ValidationError(
            f"record {record_id!r}: error_sentence_id {error_id_text!r} is not an integer"
        ) from exc
    return flag, error_id, text_to_na(correction_text)


def _record_from_parts(
    record_id: str,
    sentence_texts: list[str],
    flag_text: str,
    error_id_text: str,
    correction_text: str,
) -> ClinicalRecord:
    sentences = tuple(Sentence(i, text) for i, text in enumerate(sentence_texts))
    flag, error_id, correction = _gold_fields(record_id, flag_text, error_id_text, correction_text)
    return ClinicalRecord(
        record_id=record_id,
        sentences=sentences,
        gold_flag=flag,
        gold_error_sentence_id=error_id,
        gold_correction=correction,
    )


def parse_clinical_records(raw: bytes | str, format: str = "delimited-table") -> list[ClinicalRecord]:
    """Parse a clinical dataset file into validated records, preserving order.

    ``format`` is ``delimited-table`` (CSV) or ``json-lines``.
    """
    text = _decode_utf8(raw)
    if format == "delimited-table":
        records = _parse_clinical_csv(text)
    elif format == "json-lines":
        records = _parse_clinical_jsonl(text)
    else:
        raise ValidationError(f"unknown clinical format {format!r}")
    seen: set[str] = set()
    for record in records:
        if record.record_id in seen:
            raise ValidationError(f"duplicate record_id {record.record_id!r}")
        seen.add(record.record_id)
    return records


def _parse_clinical_csv(text: str) -> list[ClinicalRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("clinical CSV is empty (missing header)") from None
    if tuple(header) != CLINICAL_CSV_COLUMNS:
        raise ValidationError(
            f"clinical CSV header {header} does not match expected columns {list(CLINICAL_CSV_COLUMNS)}"
        )
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CLINICAL_CSV_COLUMNS):
            raise ValidationError(f"line {lineno}: expected {len(CLINICAL_CSV_COLUMNS)} columns, got {len(row)}")
        record_id, _text, sentences_json, flag_text, error_id_text, correction_text = row
        try:
            sentence_texts = json.loads(sentences_json)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"record {record_id!r}: sentences_json is not valid JSON: {exc}") from exc
        if not isinstance(sentence_texts, list) or not all(isinstance(s, str) for s in sentence_texts):
            raise ValidationError(f"record {record_id!r}: sentences_json must be a JSON array of strings")
        records.append(_record_from_parts(record_id, sentence_texts, flag_text, error_id_text, correction_text))
    return records


def _parse_clinical_jsonl(text: str) -> list[ClinicalRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ValidationError(f"line {lineno}: expected a JSON object")
        known = {"record_id", "text", "sentences", "error_flag", "error_sentence_id", "corrected_sentence"}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"line {lineno}: unknown keys {sorted(unknown)}")
        record_id = obj.get("record_id")
        sentence_texts = obj.get("sentences")
        if not isinstance(record_id, str):
            raise ValidationError(f"line {lineno}: record_id must be a string")
        if not isinstance(sentence_texts, list) or not all(isinstance(s, str) for s in sentence_texts):
            raise ValidationError(f"record {record_id!r}: sentences must be an array of strings")
        flag = obj.get("error_flag")
        flag_text = "" if flag is None else str(flag)
        error_id = obj.get("error_sentence_id")
        error_id_text = "" if error_id is None else str(error_id)
        correction = obj.get("corrected_sentence")
        correction_text = "" if correction is None else str(correction)
        records.append(_record_from_parts(record_id, sentence_texts, flag_text, error_id_text, correction_text))
    return records


def serialize_clinical_records(records: Iterable[ClinicalRecord], format: str = "delimited-table") -> str:
    """Inverse of :func:`parse_clinical_records` for the canonical schemas."""
    if format == "delimited-table":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CLINICAL_CSV_COLUMNS)
        for r in records:
            flag = "" if r.gold_flag is None else str(r.gold_flag)
            error_id = "" if r.gold_error_sentence_id is None else str(r.gold_error_sentence_id)
            correction = "" if r.gold_correction is None else na_to_text(r.gold_correction)
            writer.writerow(
                [
                    r.record_id,
                    r.full_text(),
                    json.dumps([s.text for s in r.sentences], ensure_ascii=False),
                    flag,
                    error_id,
                    correction,
                ]
            )
        return out.getvalue()
    if format == "json-lines":
        lines = []
        for r in records:
            obj: dict[str, object] = {
                "record_id": r.record_id,
                "text": r.full_text(),
                "sentences": [s.text for s in r.sentences],
            }
            if r.gold_flag is not None:
                obj["error_flag"] = r.gold_flag
                obj["error_sentence_id"] = r.gold_error_sentence_id
                obj["corrected_sentence"] = na_to_text(r.gold_correction)  # type: ignore[arg-type]
            lines.append(json.dumps(obj, ensure_ascii=False))
        return "\n".join(lines) + ("\n" if lines else "")
    raise ValidationError(f"unknown clinical format {format!r}")


_DELIMITER_SPLIT = re.compile(r".*?[.!?]+\s*|.+", re.DOTALL)


def number_sentences(text: str, scheme: str = "pre-segmented-lines") -> list[Sentence]:
    """Assign ids 0..n-1 to the sentence units of ``text``.

    ``pre-segmented-lines`` splits on newlines; rejoining the texts with
    ``"\\n"`` reconstructs the input exactly. ``delimiter-split`` is a
    fallback that cuts after sentence-ending punctuation, keeping trailing
    separators attached so plain concatenation also reconstructs the input.
    """
    if not text:
        raise ValidationError("cannot number sentences of empty text")
    if scheme == "pre-segmented-lines":
        parts = text.split("\n")
    elif scheme == "delimiter-split":
        parts = _DELIMITER_SPLIT.findall(text)
    else:
        raise ValidationError(f"unknown numbering scheme {scheme!r}")
    return [Sentence(i, part) for i, part in enumerate(parts)]


def parse_mcq_corpus(raw: bytes | str) -> list[McqRecord]:
    """Parse an MCQ json-lines corpus, validating every record."""
    text = _decode_utf8(raw)
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line, object_pairs_hook=_reject_duplicate_keys)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: invalid JSON: {exc}") from exc
        except _DuplicateKey as exc:
            raise ValidationError(f"line {lineno}: duplicate option label {exc.key!r}") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"line {lineno}: expected a JSON object")
        missing = {"question", "options", "answer"} - set(obj)
        if missing:
            raise ValidationError(f"line {lineno}: missing keys {sorted(missing)}")
        question = obj["question"]
        options = obj["options"]
        answer = obj["answer"]
        if not isinstance(question, str) or not isinstance(answer, str) or not isinstance(options, dict):
            raise ValidationError(f"line {lineno}: malformed MCQ fields")
        try:
            records.append(
                McqRecord(
                    question=question,
                    options=tuple((str(k), str(v)) for k, v in options.items()),
                    correct_label=answer,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return records


class _DuplicateKey(Exception):
    def __init__(self, key: str):
        self.key = key


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict:
    out: dict[str, object] = {}
    for key, value in pairs:
        if key in out:
            raise _DuplicateKey(key)
        out[key] = value
    return out


def serialize_mcq_corpus(records: Iterable[McqRecord]) -> str:
    lines = [
        json.dumps(
            {"question": r.question, "options": dict(r.options), "answer": r.correct_label},
            ensure_ascii=False,
        )
        for r in records
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def split_dataset(
    records: list[ClinicalRecord],
    sizes: tuple[int, int, int],
    seed: int,
    stratify_by_flag: bool = False,
) -> DatasetSplit:
    """Shuffle with a seeded Fisher-Yates permutation and slice into parts.

    ``stratify_by_flag`` allocates each gold-flag stratum proportionally
    (largest remainder) before shuffling within strata; sizes stay exact.
    """
    n_train, n_val, n_test = sizes
    if min(sizes) < 0:
        raise ValidationError(f"split sizes must be non-negative, got {sizes}")
    if n_train + n_val + n_test != len(records):
        raise ValidationError(
            f"split sizes {sizes} must sum to the number of records ({len(records)})"
        )
    rng = random.Random(seed)
    if not stratify_by_flag:
        shuffled = list(records)
        rng.shuffle(shuffled)
        train = shuffled[:n_train]
        val = shuffled[n_train : n_train + n_val]
        test = shuffled[n_train + n_val :]
    else:
        train, val, test = _stratified_parts(records, sizes, rng)
    return DatasetSplit(tuple(train), tuple(val), tuple(test), seed=seed)


def _stratified_parts(
    records: list[ClinicalRecord],
    sizes: tuple[int, int, int],
    rng: random.Random,
) -> tuple[list[ClinicalRecord], list[ClinicalRecord], list[ClinicalRecord]]:
    strata: dict[object, list[ClinicalRecord]] = {}
    for r in records:
        strata.setdefault(r.gold_flag, []).append(r)
    for group in strata.values():
        rng.shuffle(group)
    total = len(records)
    parts: tuple[list[ClinicalRecord], ...] = ([], [], [])
    # Largest-remainder allocation of each stratum across the three parts,
    # then a final adjustment pass to make part sizes exact.
    for group in strata.values():
        quotas = [len(group) * size / total if total else 0.0 for size in sizes]
        counts = [int(q) for q in quotas]
        remainder = len(group) - sum(counts)
        by_frac = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in by_frac[:remainder]:
            counts[i] += 1
        start = 0
        for part, count in zip(parts, counts):
            part.extend(group[start : start + count])
            start += count
    _rebalance(parts, sizes)
    return parts


def _rebalance(parts: tuple[list[ClinicalRecord], ...], sizes: tuple[int, int, int]) -> None:
    # Per-stratum rounding can leave parts off by a record or two; move
    # items from overfull to underfull parts (any stratum) to hit exact sizes.
    for i in range(3):
        while len(parts[i]) > sizes[i]:
            moved = parts[i].pop()
            for j in range(3):
                if len(parts[j]) < sizes[j]:
                    parts[j].append(moved)
                    break

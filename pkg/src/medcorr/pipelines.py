"""The two end-to-end error-correction systems.

The retrieval-grounded pipeline (``ms``) queries an MCQ index for the most
similar question, extracts the answer choice implied by the clinical text,
compares it against the question's correct answer to set the error flag,
then localizes and rewrites the offending sentence using the retrieved
answer. The staged pipeline (``uw``) runs detect -> localize -> correct
directly on the text and guards corrections with a ROUGE-L quality gate
that falls back to the original sentence below threshold 0.7.

Both produce :class:`Prediction` values whose flag, sentence id, and
correction are mutually consistent (flag 0 <=> id -1 <=> NA), with a full
stage-by-stage trace.
"""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .corpus import ClinicalRecord, McqRecord
from .errors import MedcorrError, PipelineStageError, ValidationError
from .gateway import LmGateway
from .metrics import rouge_l_f
from .na import NA, NAType, is_na, na_to_text, text_to_na
from .program import (
    CHAIN_OF_THOUGHT,
    PREDICT,
    Field,
    Program,
    Signature,
    run,
)
from .retrieval import TfidfIndex, query

DEFAULT_GATE_THRESHOLD = 0.7

PREDICTIONS_CSV_COLUMNS = ("record_id", "error_flag", "error_sentence_id", "corrected_sentence")


@dataclass(frozen=True)
class StageTrace:
    stage: str
    inputs: dict[str, str]
    raw_completion: str
    outputs: dict[str, str]
    attempts: int = 1


@dataclass(frozen=True)
class Prediction:
    record_id: str
    flag: int
    error_sentence_id: int
    corrected_sentence: str | NAType
    trace: tuple[StageTrace, ...] = ()
    error: str | None = None

    def __post_init__(self) -> None:
        if self.flag not in (0, 1):
            raise ValidationError(f"prediction {self.record_id!r}: flag must be 0 or 1")
        no_error = self.flag == 0
        if no_error != (self.error_sentence_id == -1) or no_error != is_na(self.corrected_sentence):
            raise ValidationError(
                f"prediction {self.record_id!r}: flag/error_sentence_id/correction are inconsistent"
            )


def no_error_prediction(record_id: str, trace: tuple[StageTrace, ...] = (), error: str | None = None) -> Prediction:
    return Prediction(record_id, 0, -1, NA, trace=trace, error=error)


def render_numbered_text(record: ClinicalRecord) -> str:
    return "\n".join(f"{sid}: {text}" for sid, text in record.sentences)


def render_mcq(record: McqRecord) -> str:
    lines = [f"Question: {record.question}"]
    lines.extend(f"{label}. {text}" for label, text in record.options)
    return "\n".join(lines)


# --- completion value coercion ---------------------------------------------

_FLAG_VALUES = {
    "0": 0, "no": 0, "false": 0, "correct": 0,
    "1": 1, "yes": 1, "true": 1, "error": 1,
}

_MATCH_VALUES = {"match", "matches", "same", "yes", "equal", "equivalent"}
_MISMATCH_VALUES = {
    "mismatch",
    "different",
    "no",
    "no match",
    "not a match",
    "not the same",
    "does not match",
    "differs",
}

_INT_IN_TEXT = re.compile(r"-?\d+")


def parse_flag_value(stage: str, value: str) -> int:
    flag = _FLAG_VALUES.get(value.strip().lower().rstrip("."))
    if flag is None:
        raise PipelineStageError(stage, f"cannot interpret {value!r} as an error flag")
    return flag


def parse_match_value(stage: str, value: str) -> int:
    """Map a match/mismatch verdict onto the error flag (mismatch -> 1)."""
    verdict = value.strip().lower().rstrip(".")
    if verdict in _MATCH_VALUES:
        return 0
    if verdict in _MISMATCH_VALUES or verdict.startswith("mismatch"):
        return 1
    if verdict.startswith("match"):
        return 0
    raise PipelineStageError(stage, f"cannot interpret {value!r} as a match verdict")


def parse_line_value(stage: str, value: str, record: ClinicalRecord) -> int:
    found = _INT_IN_TEXT.search(value)
    if not found:
        raise PipelineStageError(stage, f"no line number in {value!r}")
    line = int(found.group(0))
    if line not in record.sentence_ids():
        raise PipelineStageError(
            stage,
            f"line {line} is not a sentence id of record {record.record_id!r} "
            f"(valid ids: {list(record.sentence_ids())})",
        )
    return line


# --- quality gate -----------------------------------------------------------


def quality_gate(original_sentence: str, candidate: str, threshold: float) -> tuple[str, bool]:
    """Reject corrections that diverge too far from the original sentence.

    Returns ``(final_sentence, gated)``; the candidate survives when its
    ROUGE-L F against the original is at or above the threshold (boundary
    passes), otherwise the original is kept and ``gated`` is True.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"gate threshold must be in [0, 1], got {threshold}")
    score = rouge_l_f(candidate, original_sentence)
    if score < threshold:
        return original_sentence, True
    return candidate, False


# --- default stage programs -------------------------------------------------


def ms_extract_choice_program() -> Program:
    return Program(
        signature=Signature(
            name="extract_choice",
            instruction=(
                "A clinical text and a similar multiple-choice question are given. "
                "Identify which of the question's answer options is implicitly asserted "
                "by the clinical text, and output that option's text exactly as written."
            ),
            inputs=(
                Field("clinical_text", "the clinical text, one numbered sentence per line"),
                Field("similar_question", "a similar multiple-choice question with labeled options"),
            ),
            outputs=(Field("extracted_choice", "the option text asserted by the clinical text"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


def ms_compare_answer_program() -> Program:
    return Program(
        signature=Signature(
            name="compare_answer",
            instruction=(
                "Decide whether the extracted choice and the correct answer refer to the "
                "same clinical entity. Output 'match' if they agree, 'mismatch' otherwise."
            ),
            inputs=(
                Field("extracted_choice", "the answer choice found in the clinical text"),
                Field("correct_answer", "the correct answer of the similar question"),
            ),
            outputs=(Field("verdict", "either 'match' or 'mismatch'"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


def ms_localize_program() -> Program:
    return Program(
        signature=Signature(
            name="localize",
            instruction=(
                "Given a clinical text with numbered sentences and an erroneous answer "
                "choice, output the number of the line that most closely matches the "
                "erroneous choice."
            ),
            inputs=(
                Field("clinical_text", "the clinical text, one numbered sentence per line"),
                Field("extracted_choice", "the erroneous answer choice present in the text"),
            ),
            outputs=(Field("error_line", "the number of the line containing the error"),),
        ),
        strategy=PREDICT,
    )


def ms_correct_program() -> Program:
    return Program(
        signature=Signature(
            name="correct",
            instruction=(
                "Rewrite the erroneous sentence, replacing the incorrect finding (the "
                "extracted choice) with the correct answer. Output only the corrected sentence."
            ),
            inputs=(
                Field("error_sentence", "the sentence containing the error"),
                Field("extracted_choice", "the incorrect finding asserted by the sentence"),
                Field("correct_answer", "the correct answer to substitute"),
            ),
            outputs=(Field("corrected_sentence", "the corrected sentence"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


def uw_detect_program() -> Program:
    return Program(
        signature=Signature(
            name="detect",
            instruction=(
                "Decide whether the clinical text contains a single factual error. "
                "Output 1 if an error is present and 0 otherwise."
            ),
            inputs=(Field("clinical_text", "the clinical text, one numbered sentence per line"),),
            outputs=(Field("error_flag", "1 if the text contains an error, else 0"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


def uw_localize_program() -> Program:
    return Program(
        signature=Signature(
            name="localize",
            instruction=(
                "The clinical text contains exactly one factual error. Output the number "
                "of the line containing the error."
            ),
            inputs=(Field("clinical_text", "the clinical text, one numbered sentence per line"),),
            outputs=(Field("error_line", "the number of the line containing the error"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


def uw_correct_program() -> Program:
    return Program(
        signature=Signature(
            name="correct",
            instruction=(
                "The sentence below contains a factual error. Rewrite it so it is "
                "clinically consistent, changing as little as possible. Output only the "
                "corrected sentence."
            ),
            inputs=(Field("error_sentence", "the sentence containing the error"),),
            outputs=(Field("corrected_sentence", "the corrected sentence"),),
        ),
        strategy=CHAIN_OF_THOUGHT,
    )


# --- pipelines ---------------------------------------------------------------


def _stage_trace(stage: str, inputs: Mapping[str, str], program_run) -> StageTrace:
    return StageTrace(
        stage=stage,
        inputs=dict(inputs),
        raw_completion=program_run.raw_completion,
        outputs=dict(program_run.outputs),
        attempts=program_run.attempts,
    )


@dataclass(frozen=True)
class MsPipeline:
    """Retrieval-grounded pipeline; the localize stage is never compiled."""

    index: TfidfIndex
    extract_choice: Program
    compare_answer: Program
    localize: Program
    correct: Program
    gate_threshold: float | None = None

    def __post_init__(self) -> None:
        for name in ("extract_choice", "compare_answer", "correct"):
            program = getattr(self, name)
            if len(program.demos) > 20:
                raise ValidationError(f"ms stage {name!r} carries more than 20 demos")
        if self.localize.demos:
            raise ValidationError("ms localize stage must carry zero demos")
        if self.gate_threshold is not None and not 0.0 <= self.gate_threshold <= 1.0:
            raise ValidationError(f"gate threshold must be in [0, 1], got {self.gate_threshold}")

    @property
    def stages(self) -> dict[str, Program]:
        return {
            "extract_choice": self.extract_choice,
            "compare_answer": self.compare_answer,
            "localize": self.localize,
            "correct": self.correct,
        }

    @property
    def optimizable_stages(self) -> tuple[str, ...]:
        return ("extract_choice", "compare_answer", "correct")

    def replace_stages(self, updates: Mapping[str, Program]) -> "MsPipeline":
        unknown = set(updates) - set(self.stages)
        if unknown:
            raise ValidationError(f"unknown ms stages {sorted(unknown)}")
        return replace(self, **dict(updates))

    def predict(self, record: ClinicalRecord, gateway: LmGateway) -> Prediction:
        return ms_predict(self, record, gateway)


def ms_predict(pipeline: MsPipeline, record: ClinicalRecord, gateway: LmGateway) -> Prediction:
    """Retrieve -> extract -> compare; on a mismatch, localize and correct."""
    text = record.full_text()
    hit = query(pipeline.index, text, k=1)[0]
    mcq_rendered = render_mcq(hit.record)
    correct_answer = hit.record.correct_text
    trace: list[StageTrace] = [
        StageTrace(
            stage="retrieve",
            inputs={"query": text},
            raw_completion="",
            outputs={
                "doc_id": str(hit.doc_id),
                "score": f"{hit.score:.6f}",
                "similar_question": mcq_rendered,
                "correct_answer": correct_answer,
            },
        )
    ]

    numbered = render_numbered_text(record)
    extract_inputs = {"clinical_text": numbered, "similar_question": mcq_rendered}
    extract_run = run(pipeline.extract_choice, extract_inputs, gateway)
    trace.append(_stage_trace("extract_choice", extract_inputs, extract_run))
    extracted = extract_run.outputs["extracted_choice"]

    compare_inputs = {"extracted_choice": extracted, "correct_answer": correct_answer}
    compare_run = run(pipeline.compare_answer, compare_inputs, gateway)
    trace.append(_stage_trace("compare_answer", compare_inputs, compare_run))
    flag = parse_match_value("compare_answer", compare_run.outputs["verdict"])

    if flag == 0:
        return no_error_prediction(record.record_id, trace=tuple(trace))

    localize_inputs = {"clinical_text": numbered, "extracted_choice": extracted}
    localize_run = run(pipeline.localize, localize_inputs, gateway)
    trace.append(_stage_trace("localize", localize_inputs, localize_run))
    error_line = parse_line_value("localize", localize_run.outputs["error_line"], record)
    error_sentence = record.sentence_text(error_line)

    correct_inputs = {
        "error_sentence": error_sentence,
        "extracted_choice": extracted,
        "correct_answer": correct_answer,
    }
    correct_run = run(pipeline.correct, correct_inputs, gateway)
    trace.append(_stage_trace("correct", correct_inputs, correct_run))
    corrected = correct_run.outputs["corrected_sentence"]

    if pipeline.gate_threshold is not None:
        final, gated = quality_gate(error_sentence, corrected, pipeline.gate_threshold)
        trace.append(
            StageTrace(
                stage="quality_gate",
                inputs={"original": error_sentence, "candidate": corrected},
                raw_completion="",
                outputs={"gated": str(gated).lower(), "final": final},
            )
        )
        corrected = final

    return Prediction(record.record_id, 1, error_line, corrected, trace=tuple(trace))


@dataclass(frozen=True)
class UwPipeline:
    """Three-stage detect/localize/correct pipeline with a ROUGE-L gate."""

    detect: Program
    localize: Program
    correct: Program
    gate_threshold: float = DEFAULT_GATE_THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValidationError(f"gate threshold must be in [0, 1], got {self.gate_threshold}")

    @property
    def stages(self) -> dict[str, Program]:
        return {"detect": self.detect, "localize": self.localize, "correct": self.correct}

    @property
    def optimizable_stages(self) -> tuple[str, ...]:
        return ("detect", "localize", "correct")

    def replace_stages(self, updates: Mapping[str, Program]) -> "UwPipeline":
        unknown = set(updates) - set(self.stages)
        if unknown:
            raise ValidationError(f"unknown uw stages {sorted(unknown)}")
        return replace(self, **dict(updates))

    def predict(self, record: ClinicalRecord, gateway: LmGateway) -> Prediction:
        return uw_predict(self, record, gateway)


def uw_predict(pipeline: UwPipeline, record: ClinicalRecord, gateway: LmGateway) -> Prediction:
    numbered = render_numbered_text(record)
    detect_inputs = {"clinical_text": numbered}
    detect_run = run(pipeline.detect, detect_inputs, gateway)
    trace: list[StageTrace] = [_stage_trace("detect", detect_inputs, detect_run)]
    flag = parse_flag_value("detect", detect_run.outputs["error_flag"])
    if flag == 0:
        return no_error_prediction(record.record_id, trace=tuple(trace))

    localize_inputs = {"clinical_text": numbered}
    localize_run = run(pipeline.localize, localize_inputs, gateway)
    trace.append(_stage_trace("localize", localize_inputs, localize_run))
    error_line = parse_line_value("localize", localize_run.outputs["error_line"], record)
    error_sentence = record.sentence_text(error_line)

    correct_inputs = {"error_sentence": error_sentence}
    correct_run = run(pipeline.correct, correct_inputs, gateway)
    trace.append(_stage_trace("correct", correct_inputs, correct_run))
    candidate = correct_run.outputs["corrected_sentence"]

    final, gated = quality_gate(error_sentence, candidate, pipeline.gate_threshold)
    trace.append(
        StageTrace(
            stage="quality_gate",
            inputs={"original": error_sentence, "candidate": candidate},
            raw_completion="",
            outputs={"gated": str(gated).lower(), "final": final},
        )
    )
    return Prediction(record.record_id, 1, error_line, final, trace=tuple(trace))


def default_ms_pipeline(index: TfidfIndex, gate_threshold: float | None = None) -> MsPipeline:
    return MsPipeline(
        index=index,
        extract_choice=ms_extract_choice_program(),
        compare_answer=ms_compare_answer_program(),
        localize=ms_localize_program(),
        correct=ms_correct_program(),
        gate_threshold=gate_threshold,
    )


def default_uw_pipeline(gate_threshold: float = DEFAULT_GATE_THRESHOLD) -> UwPipeline:
    return UwPipeline(
        detect=uw_detect_program(),
        localize=uw_localize_program(),
        correct=uw_correct_program(),
        gate_threshold=gate_threshold,
    )


# --- batch prediction ---------------------------------------------------------


def predict_batch(
    pipeline: MsPipeline | UwPipeline,
    records: Sequence[ClinicalRecord],
    gateway: LmGateway,
    concurrency: int = 4,
    strict: bool = False,
) -> list[Prediction]:
    """Predict every record, output in input order regardless of completion order.

    Per-record failures become flag-0 fallback entries carrying the error
    message; in strict mode the first failure aborts the batch.
    """
    if concurrency < 1:
        raise ValidationError(f"concurrency must be >= 1, got {concurrency}")

    def one(record: ClinicalRecord) -> Prediction:
        return pipeline.predict(record, gateway)

    results: list[Prediction] = []
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [pool.submit(one, record) for record in records]
        for record, future in zip(records, futures):
            try:
                results.append(future.result())
            except MedcorrError as exc:
                if strict:
                    raise
                results.append(no_error_prediction(record.record_id, error=str(exc)))
    return results


# --- predictions and trace files ----------------------------------------------


def serialize_predictions(predictions: Iterable[Prediction]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(PREDICTIONS_CSV_COLUMNS)
    for p in predictions:
        writer.writerow(
            [p.record_id, str(p.flag), str(p.error_sentence_id), na_to_text(p.corrected_sentence)]
        )
    return out.getvalue()


def parse_predictions(text: str) -> list[Prediction]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("predictions file is empty (missing header)") from None
    if tuple(header) != PREDICTIONS_CSV_COLUMNS:
        raise ValidationError(
            f"predictions header {header} does not match {list(PREDICTIONS_CSV_COLUMNS)}"
        )
    predictions = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ValidationError(f"line {lineno}: expected 4 columns, got {len(row)}")
        record_id, flag_text, error_id_text, correction_text = row
        try:
            flag = int(flag_text)
            error_id = int(error_id_text)
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: non-integer flag or sentence id") from exc
        try:
            predictions.append(
                Prediction(record_id, flag, error_id, text_to_na(correction_text))
            )
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return predictions


def serialize_traces(predictions: Iterable[Prediction]) -> str:
    lines = []
    for p in predictions:
        lines.append(
            json.dumps(
                {
                    "record_id": p.record_id,
                    "error_flag": p.flag,
                    "error_sentence_id": p.error_sentence_id,
                    "corrected_sentence": na_to_text(p.corrected_sentence),
                    "error": p.error,
                    "trace": [
                        {
                            "stage": t.stage,
                            "inputs": t.inputs,
                            "raw_completion": t.raw_completion,
                            "outputs": t.outputs,
                            "attempts": t.attempts,
                        }
                        for t in p.trace
                    ],
                },
                ensure_ascii=False,
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")

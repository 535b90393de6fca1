"""Minimal declarative LLM-program framework.

A :class:`Program` binds a typed :class:`Signature` to a prompting strategy
(plain prediction or chain of thought) and an ordered demo set. Rendering is
byte-deterministic; completions come back as ``Label: value`` fields and are
parsed case-insensitively. Chain of thought injects a reserved ``rationale``
output ahead of the declared outputs at render and parse time.

Prompt layout (pinned by this package, documented in the README):

* system message: instruction, then a format block listing every field
  label with its description;
* user message: demo blocks then the live block, separated by ``---``
  lines; each block is ``Label: value`` lines, and the live block leaves
  the output labels open for the model to fill.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple

from .errors import CompletionParseError, ValidationError
from .gateway import LmGateway, Message

PREDICT = "predict"
CHAIN_OF_THOUGHT = "chain-of-thought"
STRATEGIES = (PREDICT, CHAIN_OF_THOUGHT)

RATIONALE_FIELD = "rationale"
RATIONALE_DESCRIPTION = "step-by-step reasoning that leads to the output fields"

DEFAULT_MAX_DEMOS = 20

PROGRAM_FORMAT_VERSION = 1

_FIELD_NAME = re.compile(r"[a-z][a-z0-9_]*")
_BLOCK_SEPARATOR = "\n\n---\n\n"


class Field(NamedTuple):
    name: str
    description: str


@dataclass(frozen=True)
class Signature:
    """Named input/output fields plus the task instruction."""

    name: str
    instruction: str
    inputs: tuple[Field, ...]
    outputs: tuple[Field, ...]

    def __post_init__(self) -> None:
        if not self.inputs or not self.outputs:
            raise ValidationError(f"signature {self.name!r} needs at least one input and one output")
        names = [f.name for f in self.inputs + self.outputs]
        if len(set(names)) != len(names):
            raise ValidationError(f"signature {self.name!r}: field names must be unique")
        for name in names:
            if not _FIELD_NAME.fullmatch(name):
                raise ValidationError(
                    f"signature {self.name!r}: field name {name!r} must be a lowercase identifier"
                )
            if name == RATIONALE_FIELD:
                raise ValidationError(
                    f"signature {self.name!r}: {RATIONALE_FIELD!r} is reserved for chain of thought"
                )

    def input_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.inputs)

    def output_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.outputs)


@dataclass(frozen=True)
class Demo:
    """A worked example; output values may include a captured rationale."""

    input_values: dict[str, str]
    output_values: dict[str, str]
    source_record_id: str | None = None


@dataclass(frozen=True)
class Program:
    signature: Signature
    strategy: str = PREDICT
    demos: tuple[Demo, ...] = ()
    compiled_instruction: str | None = None
    max_demos: int = DEFAULT_MAX_DEMOS

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if len(self.demos) > self.max_demos:
            raise ValidationError(
                f"program {self.signature.name!r}: {len(self.demos)} demos exceed max {self.max_demos}"
            )
        inputs = set(self.signature.input_names())
        allowed_outputs = set(self.signature.output_names()) | {RATIONALE_FIELD}
        for i, demo in enumerate(self.demos):
            if not inputs <= set(demo.input_values):
                missing = sorted(inputs - set(demo.input_values))
                raise ValidationError(
                    f"program {self.signature.name!r}: demo {i} is missing input fields {missing}"
                )
            unknown = set(demo.input_values) - inputs
            if unknown:
                raise ValidationError(
                    f"program {self.signature.name!r}: demo {i} has unknown input fields {sorted(unknown)}"
                )
            bad = set(demo.output_values) - allowed_outputs
            if bad:
                raise ValidationError(
                    f"program {self.signature.name!r}: demo {i} has unknown output fields {sorted(bad)}"
                )

    @property
    def instruction(self) -> str:
        return self.compiled_instruction if self.compiled_instruction is not None else self.signature.instruction

    def with_demos(self, demos: tuple[Demo, ...]) -> "Program":
        return replace(self, demos=demos)

    def with_instruction(self, instruction: str | None) -> "Program":
        return replace(self, compiled_instruction=instruction)


def field_label(name: str) -> str:
    """``error_line`` renders as ``Error Line``."""
    return " ".join(part.capitalize() for part in name.split("_"))


def _normalize_label(label: str) -> str:
    return label.strip().lower().replace(" ", "_")


def _output_fields(program: Program) -> list[Field]:
    fields = list(program.signature.outputs)
    if program.strategy == CHAIN_OF_THOUGHT:
        fields.insert(0, Field(RATIONALE_FIELD, RATIONALE_DESCRIPTION))
    return fields


def _demo_block(program: Program, demo: Demo) -> str:
    lines = [
        f"{field_label(name)}: {demo.input_values[name]}"
        for name in program.signature.input_names()
    ]
    for out in _output_fields(program):
        if out.name in demo.output_values:
            lines.append(f"{field_label(out.name)}: {demo.output_values[out.name]}")
    return "\n".join(lines)


def _live_block(program: Program, inputs: Mapping[str, str]) -> str:
    lines = [f"{field_label(name)}: {inputs[name]}" for name in program.signature.input_names()]
    lines.extend(f"{field_label(out.name)}:" for out in _output_fields(program))
    return "\n".join(lines)


def render_messages(program: Program, inputs: Mapping[str, str]) -> list[Message]:
    """Deterministic prompt rendering; raises on missing/unknown inputs."""
    expected = set(program.signature.input_names())
    missing = expected - set(inputs)
    if missing:
        raise ValidationError(f"missing input field(s): {sorted(missing)}")
    unknown = set(inputs) - expected
    if unknown:
        raise ValidationError(f"unknown input field(s): {sorted(unknown)}")

    format_lines = [f"{field_label(f.name)}: {f.description}" for f in program.signature.inputs]
    format_lines.extend(f"{field_label(f.name)}: {f.description}" for f in _output_fields(program))
    system = program.instruction + "\n\nFollow the following format.\n\n" + "\n".join(format_lines)

    blocks = [_demo_block(program, demo) for demo in program.demos]
    blocks.append(_live_block(program, inputs))
    return [Message("system", system), Message("user", _BLOCK_SEPARATOR.join(blocks))]


def render_outputs_as_completion(program: Program, output_values: Mapping[str, str]) -> str:
    """Render output values the way a well-formed completion would look."""
    lines = []
    for out in _output_fields(program):
        if out.name in output_values:
            lines.append(f"{field_label(out.name)}: {output_values[out.name]}")
    return "\n".join(lines)


_LABEL_LINE = re.compile(r"^[ \t]*([A-Za-z][A-Za-z0-9_ ]*?)[ \t]*:", re.MULTILINE)


def parse_completion(program: Program, completion_text: str) -> dict[str, str]:
    """Extract labeled output fields from a completion.

    Labels match case-insensitively at line starts, with spaces and
    underscores interchangeable; the first occurrence of a field wins and
    its value runs until the next recognized label or the end of the text.
    The rationale field is recognized but optional; any declared output
    that is absent raises :class:`CompletionParseError` naming it.
    """
    expected = set(program.signature.output_names())
    recognized = expected | ({RATIONALE_FIELD} if program.strategy == CHAIN_OF_THOUGHT else set())
    boundaries: list[tuple[str, int, int]] = []
    for match in _LABEL_LINE.finditer(completion_text):
        name = _normalize_label(match.group(1))
        if name in recognized:
            boundaries.append((name, match.start(), match.end()))
    values: dict[str, str] = {}
    for i, (name, _, value_start) in enumerate(boundaries):
        if name in values:
            continue
        value_end = boundaries[i + 1][1] if i + 1 < len(boundaries) else len(completion_text)
        values[name] = completion_text[value_start:value_end].strip()
    missing = sorted(expected - set(values))
    if missing:
        raise CompletionParseError(
            f"completion is missing output field(s): {missing}",
            missing_fields=tuple(missing),
            raw_text=completion_text,
        )
    return values


@dataclass(frozen=True)
class ProgramRun:
    outputs: dict[str, str]
    raw_completion: str
    attempts: int


def _reminder(program: Program) -> str:
    labels = ", ".join(field_label(f.name) for f in _output_fields(program))
    return f"Your response must contain exactly these labeled fields: {labels}."


def run(program: Program, inputs: Mapping[str, str], gateway: LmGateway) -> ProgramRun:
    """Render, complete, parse; one retry with a format reminder on parse failure."""
    messages = render_messages(program, inputs)
    response = gateway.complete_messages(messages)
    try:
        return ProgramRun(parse_completion(program, response.text), response.text, attempts=1)
    except CompletionParseError:
        pass
    retry_messages = messages[:-1] + [
        Message(messages[-1].role, messages[-1].content + "\n\n" + _reminder(program))
    ]
    retry_response = gateway.complete_messages(retry_messages)
    try:
        return ProgramRun(parse_completion(program, retry_response.text), retry_response.text, attempts=2)
    except CompletionParseError as exc:
        raise CompletionParseError(
            f"program {program.signature.name!r}: completion unparseable after 2 attempts: {exc}",
            missing_fields=exc.missing_fields,
            raw_text=retry_response.text,
            attempts=2,
        ) from None


def program_to_dict(program: Program) -> dict:
    return {
        "format_version": PROGRAM_FORMAT_VERSION,
        "signature": {
            "name": program.signature.name,
            "instruction": program.signature.instruction,
            "inputs": [{"name": f.name, "description": f.description} for f in program.signature.inputs],
            "outputs": [{"name": f.name, "description": f.description} for f in program.signature.outputs],
        },
        "strategy": program.strategy,
        "compiled_instruction": program.compiled_instruction,
        "max_demos": program.max_demos,
        "demos": [
            {
                "input_values": demo.input_values,
                "output_values": demo.output_values,
                "source_record_id": demo.source_record_id,
            }
            for demo in program.demos
        ],
    }


def program_from_dict(payload: dict) -> Program:
    version = payload.get("format_version")
    if version != PROGRAM_FORMAT_VERSION:
        raise ValidationError(f"unsupported program format_version {version!r}")
    sig = payload["signature"]
    signature = Signature(
        name=sig["name"],
        instruction=sig["instruction"],
        inputs=tuple(Field(f["name"], f["description"]) for f in sig["inputs"]),
        outputs=tuple(Field(f["name"], f["description"]) for f in sig["outputs"]),
    )
    demos = tuple(
        Demo(
            input_values=dict(d["input_values"]),
            output_values=dict(d["output_values"]),
            source_record_id=d.get("source_record_id"),
        )
        for d in payload["demos"]
    )
    return Program(
        signature=signature,
        strategy=payload["strategy"],
        demos=demos,
        compiled_instruction=payload.get("compiled_instruction"),
        max_demos=payload.get("max_demos", DEFAULT_MAX_DEMOS),
    )


def program_to_json(program: Program) -> str:
    return json.dumps(program_to_dict(program), ensure_ascii=False, indent=2, sort_keys=True)


def program_from_json(text: str) -> Program:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"program file is not valid JSON: {exc}") from exc
    try:
        return program_from_dict(payload)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"program file is missing required fields: {exc}") from exc

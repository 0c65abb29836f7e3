"""Structured-output parsing for LLM responses."""

from __future__ import annotations

import json
import re

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

ANSWER_LETTERS = "ABCDEFGHIJ"

_DECODER = json.JSONDecoder()


class ResponseParseError(ValueError):
    """No usable JSON object in a model response."""


class ResponseValidationError(ResponseParseError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class QAResponse(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")

    llm_answer_choice: str
    selected_option_text: str
    reasoning: str

    @field_validator("llm_answer_choice")
    @classmethod
    def _letter(cls, v: str) -> str:
        v = v.strip().upper()
        if len(v) != 1 or v not in ANSWER_LETTERS:
            raise ValueError(f"answer choice must be one letter A-J, got {v!r}")
        return v


def _objects(text: str):
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = _DECODER.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        yield obj


def extract_json_object(text: str) -> dict:
    """First decodable JSON object in ``text``; prose and code fences are skipped."""
    for obj in _objects(text):
        if isinstance(obj, dict):
            return obj
    raise ResponseParseError("no JSON object found in response")


def validate_model(model: type[BaseModel], obj: dict):
    try:
        return model.model_validate(obj)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or None
        raise ResponseValidationError(f"{field}: {err['msg']}", field=field) from None


def parse_qa_response(raw: str) -> QAResponse:
    return validate_model(QAResponse, extract_json_object(raw))

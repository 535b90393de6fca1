"""The "no correction" sentinel.

Error-free records carry the literal string ``"NA"`` in data files; inside
the engine that value is this distinct singleton so NA-ness checks can never
be confused with a sentence that happens to read "NA-positive" or similar.
"""

from __future__ import annotations


class NAType:
    """Singleton marker for a missing correction."""

    _instance: "NAType | None" = None

    def __new__(cls) -> "NAType":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NA"

    def __bool__(self) -> bool:
        return False


NA = NAType()

NA_LITERAL = "NA"


def is_na(value: object) -> bool:
    return isinstance(value, NAType)


def na_to_text(value: str | NAType) -> str:
    """Boundary encoding: the sentinel becomes the literal string "NA"."""
    return NA_LITERAL if is_na(value) else str(value)


def text_to_na(text: str) -> str | NAType:
    """Boundary decoding: the exact literal "NA" becomes the sentinel."""
    return NA if text == NA_LITERAL else text

"""Exception types shared across the package."""

from __future__ import annotations


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class TraceFormatError(ContractError):
    """A DKVT trace file could not be parsed.

    ``field`` names the header field or payload section that failed and
    ``offset`` is the byte offset where the problem was detected.
    """

    def __init__(self, message: str, field: str, offset: int):
        super().__init__(f"{message} (field={field}, offset={offset})")
        self.field = field
        self.offset = offset

    def to_dict(self) -> dict:
        return {"error": "trace_format", "field": self.field, "offset": self.offset,
                "message": str(self)}

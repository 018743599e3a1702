from pydantic import BaseModel
from typing import Optional

from voxmap.render import render_caret


class VoxmapError(Exception):
    exit_code: int = 1


class OutOfBounds(VoxmapError):
    pass


class PoseInvalid(VoxmapError):
    pass


class UnknownSlot(VoxmapError):
    pass


class LengthMismatch(VoxmapError):
    pass


class CodecError(VoxmapError):
    pass


class ConfigMismatch(CodecError):
    pass


class CorruptStream(CodecError):
    pass


class OutOfOrder(CodecError):
    def __init__(self, expected: int, received: int):
        super().__init__(f"expected delta {expected}, received {received}")
        self.expected = expected
        self.received = received


class ConnectionLost(VoxmapError):
    def __init__(self, last_applied: int):
        super().__init__(
            f"connection lost after applying delta {last_applied}"
        )
        self.last_applied = last_applied


class IngestError(VoxmapError):
    pass


class CorruptFrame(IngestError):
    pass


class PoseParseError(IngestError):
    pass


class CountMismatch(IngestError):
    pass


class InvalidSpec(IngestError):
    exit_code = 2


class EmptyInput(IngestError):
    exit_code = 2


class SpecSyntaxError(VoxmapError):
    exit_code = 2

    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.message = message
        self.text = text
        self.position = position

    def render(self) -> str:
        return render_caret(self.text, self.position, self.message)


class CommandError(BaseModel):
    message: str
    exit_code: int = 1
    detail: Optional[str] = None

    @classmethod
    def from_exception(cls, error: Exception) -> "CommandError":
        if isinstance(error, SpecSyntaxError):
            return cls(message=error.message, exit_code=2, detail=error.render())
        if isinstance(error, VoxmapError):
            return cls(
                message=f"{type(error).__name__}: {error}", exit_code=error.exit_code
            )
        return cls(message=f"{type(error).__name__}: {error}")

    def render(self) -> str:
        if self.detail:
            return f"error: {self.message}\n{self.detail}"
        return f"error: {self.message}"

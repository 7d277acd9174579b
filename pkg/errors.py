"""Error types shared by every layer.

Each error carries a human readable ``detail`` and a ``category`` with a
matching process exit code, the same way the web service raised
HTTPException(status_code, detail) and let the framework map it.
"""


class CrazylinkError(Exception):
    category = "runtime"
    exit_code = 4

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail

    def __str__(self) -> str:
        return f"{self.category}: {self.detail}" if self.detail else self.category


class UsageError(CrazylinkError):
    category = "usage"
    exit_code = 2


class ConfigError(CrazylinkError):
    category = "config"
    exit_code = 3

    def __init__(self, detail: str, field_paths: list[str] | None = None):
        super().__init__(detail)
        self.field_paths = field_paths or []


class ArtifactError(CrazylinkError):
    category = "io"
    exit_code = 5

    def __init__(self, detail: str, path: str | None = None, row: int | None = None):
        location = path or ""
        if row is not None:
            location = f"{location}:{row}"
        super().__init__(f"{location}: {detail}" if location else detail)
        self.path = path
        self.row = row


class SchemaMismatch(ArtifactError):
    pass


class CodecError(CrazylinkError):
    category = "codec"
    exit_code = 6


class EmptyInput(CodecError):
    pass


class Oversize(CodecError):
    pass


class ReservedBitsSet(CodecError):
    pass


class PayloadTooLarge(CodecError):
    pass


class Truncated(CodecError):
    pass


class BadVersion(CodecError):
    pass


class BadKind(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class EmptyGroup(CrazylinkError):
    pass


class TooManyMissing(CrazylinkError):
    pass


class EndpointClosed(CrazylinkError):
    pass


class WouldBlock(CrazylinkError):
    pass


class PastInstant(CrazylinkError):
    pass


class EmptyQueue(CrazylinkError):
    pass


class StartupError(CrazylinkError):
    pass


class MissingTimestamp(CrazylinkError):
    def __init__(self, stage: str):
        super().__init__(f"missing timestamp for stage {stage!r}")
        self.stage = stage


class ResendBudgetExhausted(CrazylinkError):
    def __init__(self, token: int, attempts: int, log: list | None = None):
        super().__init__(f"token {token} unanswered after {attempts} transmissions")
        self.token = token
        self.attempts = attempts
        self.log = log if log is not None else []

"""Shared exception types.

Every module raises one of these so the CLI can map failures onto stable
exit codes (config -> 2, missing file -> 3, anything else -> 1).
"""


class InvalidInputError(ValueError):
    """Malformed or out-of-contract data passed to an operation."""


class InvalidConfigError(ValueError):
    """A configuration value violates its invariants."""


class MissingFileError(FileNotFoundError):
    """A referenced file or directory does not exist."""


class SkipUtterance(Exception):
    """Signal that an utterance cannot be used (e.g. too short to split).

    Callers exclude the utterance and keep going; this never aborts a run.
    """


class ManifestError(InvalidInputError):
    """A manifest row failed to parse; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")

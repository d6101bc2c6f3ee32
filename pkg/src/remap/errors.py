"""Error taxonomy shared by the engine and its CLI.

Each category maps to a fixed process exit code so that scripted
pipelines can tell configuration mistakes from bad data from numeric
blowups without parsing stderr.
"""
from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class EngineError(Exception):
    """Base class for all errors raised deliberately by this package."""

    exit_code = EXIT_DATA


class ConfigError(EngineError):
    """Bad or contradictory run configuration. Exit code 2."""

    exit_code = EXIT_CONFIG

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(EngineError):
    """Unreadable, inconsistent, or insufficient input data. Exit code 3."""

    exit_code = EXIT_DATA


class FormatError(DataError):
    """A file does not follow its declared binary or JSON layout."""


class ContractError(DataError):
    """Caller passed arguments that violate a documented precondition."""


class NumericError(EngineError):
    """NaN or overflow reached a numeric kernel. Exit code 4."""

    exit_code = EXIT_NUMERIC

"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: UsageError -> 1, DataError -> 2,
BackendError -> 3.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class UsageError(PipelineError):
    """Bad flag, bad parameter value, or an unsupported mode."""

    exit_code = 1


class DataError(PipelineError):
    """Malformed or inconsistent input data (schema violations, missing ids)."""

    exit_code = 2


class BackendError(PipelineError):
    """A scorer or sampler backend failed or violated its wire protocol."""

    exit_code = 3

"""Exception taxonomy shared across modules; the CLI maps these to exit codes."""


class UsageError(Exception):
    """Bad flags, malformed config, contradictory options. CLI exit code 1."""


class DataError(Exception):
    """Malformed or truncated input files, schema violations. CLI exit code 2."""

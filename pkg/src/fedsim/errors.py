"""Error types shared across the package.

The CLI maps ConfigError to exit code 2 and IngestionError to exit code 3;
everything else is a plain bug and escapes with a traceback.
"""


class ConfigError(ValueError):
    """Invalid configuration or model/batch geometry."""


class IngestionError(ValueError):
    """Malformed input data file (bad magic, truncated payload, ...)."""

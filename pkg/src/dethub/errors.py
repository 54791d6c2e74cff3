"""Exception hierarchy shared by the library and the command line.

Each error carries a machine-readable ``code`` and the process exit status the
CLI uses when the error escapes a command.
"""


class DethubError(Exception):
    code = "error"
    exit_status = 1

    def to_json(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ConfigError(DethubError, ValueError):
    code = "config-error"
    exit_status = 2


class EmbedderMismatch(ConfigError):
    code = "embedder-mismatch"


class DataError(DethubError, ValueError):
    code = "data-error"
    exit_status = 3


class NumericError(DethubError, FloatingPointError):
    code = "numeric-failure"
    exit_status = 4

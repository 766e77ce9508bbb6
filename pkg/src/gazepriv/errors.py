"""Exception hierarchy. The CLI exits 2 on ConfigError and 1 on every other GazePrivError."""


class GazePrivError(Exception):
    category = "data"


class ParseError(GazePrivError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SchemaError(GazePrivError):
    category = "schema"


class WindowRejected(GazePrivError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(reason)


class ConfigError(GazePrivError):
    category = "config"


class StepError(GazePrivError):
    category = "config"


class NumericError(GazePrivError):
    category = "numeric"


class PairingError(GazePrivError):
    pass


class IntegrityError(GazePrivError):
    pass

"""Exception hierarchy. Every error raised on purpose derives from DlnLabError."""


class DlnLabError(Exception):
    pass


class EmptyAfterTokenize(DlnLabError, ValueError):
    pass


class EmptyInput(DlnLabError, ValueError):
    pass


class MissingIdf(DlnLabError, ValueError):
    pass


class ShapeMismatch(DlnLabError, ValueError):
    def __init__(self, op, *shapes):
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class NotScalar(DlnLabError, ValueError):
    pass


class NotADistribution(DlnLabError, ValueError):
    pass


class MalformedRecord(DlnLabError, ValueError):
    def __init__(self, lineno, reason):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {reason}")


class DatasetTooSmall(DlnLabError, ValueError):
    pass


class MissingDlnCheckpoint(DlnLabError, RuntimeError):
    pass


class ConfigError(DlnLabError, ValueError):
    pass

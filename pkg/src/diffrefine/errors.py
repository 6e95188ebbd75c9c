class InvalidArgument(ValueError):
    """Raised when a caller passes arguments that violate an operation's contract."""


class InvalidData(ValueError):
    """Raised when input data cannot be interpreted (all-NaN maps, corrupt files)."""


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced the file a command needs."""

    def __init__(self, path, stage: str | None = None):
        self.path = path
        self.stage = stage
        msg = f"missing artifact: {path}"
        if stage:
            msg += f" (run the '{stage}' stage first)"
        super().__init__(msg)


class NumericalFailure(RuntimeError):
    """Training diverged or produced non-finite values."""

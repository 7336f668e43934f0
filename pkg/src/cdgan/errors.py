"""Exception types shared across the package."""


class CDGANError(Exception):
    pass


class InvalidConfigError(CDGANError, ValueError):
    pass


class ShapeMismatchError(CDGANError, ValueError):
    pass


class InvalidLabelError(CDGANError, ValueError):
    pass


class LossDomainError(CDGANError, ValueError):
    """A probability fed to a log-loss sits outside the open unit interval."""


class NonFiniteError(CDGANError, FloatingPointError):
    """Raised when a loss term or gradient stops being finite.

    ``term`` names the offending quantity so training logs can point at it.
    """

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite value in {term!r}")


class DatasetError(CDGANError):
    pass


class JudgeUnusableError(CDGANError):
    def __init__(self, accuracy: float, floor: float):
        self.accuracy = accuracy
        self.floor = floor
        super().__init__(
            f"judge real-test accuracy {accuracy:.4f} is below the floor {floor:.2f}"
        )

"""Exception hierarchy shared by every module."""


class TvrnError(Exception):
    """Base class; the CLI maps it to a structured message and exit code 1."""


class InvalidShapeError(TvrnError, ValueError):
    pass


class InvalidGeometryError(TvrnError, ValueError):
    pass


class InvalidLengthError(TvrnError, ValueError):
    pass


class FormatError(TvrnError, ValueError):
    pass


class InvalidSpecError(TvrnError, ValueError):
    pass


class InvalidQPError(TvrnError, ValueError):
    pass


class InvalidPairError(TvrnError, ValueError):
    pass


class InvalidTimeError(TvrnError, ValueError):
    pass


class InvalidMetadataError(TvrnError, ValueError):
    pass


class InvalidWindowError(TvrnError, ValueError):
    pass


class InvalidDatasetError(TvrnError, ValueError):
    pass


class InvalidEpsError(TvrnError, ValueError):
    pass


class NotComputableError(TvrnError, ArithmeticError):
    """BD-rate cannot be computed (too few points or no quality overlap)."""


class TrainingFailureError(TvrnError, RuntimeError):
    """Loss became non-finite during training."""


class TapeError(TvrnError, RuntimeError):
    pass


class InvalidConfigError(TvrnError, ValueError):
    pass

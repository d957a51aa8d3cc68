"""Exception hierarchy shared by every module."""


class CorrReidError(Exception):
    """Base class for all package errors."""


class ShapeError(CorrReidError, ValueError):
    pass


class DegenerateRowError(CorrReidError, ValueError):
    """A softmax row has no admissible entry."""

    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"softmax row {row} has an empty mask")


class ConfigError(CorrReidError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class StateError(CorrReidError, RuntimeError):
    pass


class ZeroNormError(CorrReidError, ValueError):
    pass


class DataError(CorrReidError, ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyManifestError(ManifestError):
    pass


class DuplicateItemError(ManifestError):
    def __init__(self, item_id, first_line, line):
        self.item_id = item_id
        self.first_line = first_line
        super().__init__(
            f"duplicate item_id {item_id!r} (first defined on line {first_line})", line
        )


class UnknownSplitError(ManifestError):
    pass


class MissingGalleryLabelError(ManifestError):
    pass


class StoreError(DataError):
    pass


class MagicMismatchError(StoreError):
    pass


class TruncatedPayloadError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass

class FaceRestoreError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(FaceRestoreError, ValueError):
    pass


class EmptyDatasetError(FaceRestoreError):
    pass


class InvalidRecordError(FaceRestoreError, ValueError):
    pass


class InvalidPromptError(FaceRestoreError, ValueError):
    pass


class DegenerateMapError(FaceRestoreError, ValueError):
    pass

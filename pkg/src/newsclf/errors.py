"""Exception types shared across the package."""


class NewsclfError(Exception):
    """Base class for all package errors."""


class CorpusIOError(NewsclfError):
    """A corpus file could not be read or written."""


class FormatError(NewsclfError):
    """A file exists but its content does not match the expected format."""


class ValidationError(NewsclfError):
    """Input data violates a documented invariant."""


class AugmentError(NewsclfError):
    """An augmentation op failed; the message carries the instance id."""


class NumericError(NewsclfError):
    """Training produced a non-finite loss (bad learning rate or corrupt input)."""


class BackendError(NewsclfError):
    """The external backend reported an error or misbehaved."""


class BackendTimeout(BackendError):
    """The backend did not answer within the configured deadline."""


class ProtocolError(BackendError):
    """The backend answered, but the reply violates the wire protocol."""


class ManifestVersionError(NewsclfError):
    """A persisted manifest has an unsupported schema version."""


class PipelineError(NewsclfError):
    """An experiment stage failed (e.g. every seed of a sweep errored)."""

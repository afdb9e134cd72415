"""Exception types shared across the package."""


class ChoroidSegError(Exception):
    """Base class for all errors raised by this package."""


class SpecValidationError(ChoroidSegError):
    """A domain spec violates one of its invariants."""


class DataError(ChoroidSegError):
    """Dataset loading or validation failed."""


class LabelVisibilityError(ChoroidSegError):
    """Mask contents were requested from a label-blind dataset."""


class ConfigError(ChoroidSegError):
    """A configuration value or combination is invalid."""


class CheckpointError(ChoroidSegError):
    """A checkpoint is missing, corrupt, or incompatible with the config."""


class ExtractorWeightsError(ChoroidSegError):
    """Pretrained feature-extractor weights could not be resolved."""


class TrainingDiverged(ChoroidSegError):
    """A non-finite loss was encountered during training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record

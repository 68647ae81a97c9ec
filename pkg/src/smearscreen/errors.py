"""Exception types shared across the pipeline."""


class SmearScreenError(Exception):
    """Base class for all pipeline errors."""


class ImageFormatError(SmearScreenError):
    """Unreadable, color, paletted, or unsupported-depth image file."""


class ValidationError(SmearScreenError):
    """Bad parameters or inputs detected before any work starts."""


class CheckpointError(SmearScreenError):
    """Malformed, truncated, or wrong-version checkpoint file."""


class TrainingDiverged(SmearScreenError):
    """Non-finite loss encountered during training.

    Carries enough context to locate the failure.
    """

    def __init__(self, epoch: int, batch: int, layer: str):
        self.epoch = epoch
        self.batch = batch
        self.layer = layer
        super().__init__(
            f"non-finite values during epoch {epoch}, batch {batch}, at layer {layer}"
        )

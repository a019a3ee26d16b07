"""Shared exception types."""


class ShapeError(ValueError):
    """Array shapes are inconsistent with the requested operation."""


class EmptyMaskError(ValueError):
    """A binary mask contains no foreground pixels."""


class DatasetError(RuntimeError):
    """A dataset entry could not be ingested."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"{sample_id}: {message}")
        self.sample_id = sample_id

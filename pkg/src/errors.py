"""
Exceptions raised by sketchsal and the formatter that renders them.

Errors fall into four families that the command line maps to exit codes:
unreadable files, unusable pretrained weights, rejected inputs or
settings, and computations that produced no usable result. Each carries a
context dict whose well-known keys (file_path, photo, step, ...) are
printed first by format_error_message.
"""

from typing import Optional, Dict, Any


class SketchSaliencyError(Exception):
    """Root of every error raised while training, decoding or scoring saliency."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        """
        Args:
            message: One-line description, shown after "Error:"
            context: Offending values keyed by name (photo id, step, file path)
        """
        self.message = message
        self.context = context or {}
        super().__init__(self.format_error())

    def format_error(self) -> str:
        return format_error_message(self.message, self.context)


class FileSystemError(SketchSaliencyError):
    """
    A dataset or run artifact on disk could not be read.

    Raised for a missing or malformed manifest.json, photo or mask files the
    manifest points at, sketches.ndjson lines that do not parse, and
    checkpoints that are absent or not a torch archive.
    """
    pass


class DependencyError(SketchSaliencyError):
    """
    Pretrained VGG-16 weights were found but do not fit the encoder.

    The file loads, yet its keys or tensor shapes differ from the
    convolution stack built for the configured preset.
    """
    pass


class ValidationError(SketchSaliencyError):
    """
    An input, tensor or setting was rejected before any work was done.

    Covers stroke-5 sequences that break the one-hot pen rule or exceed
    T_max, transforms that are not invertible on the attention grid,
    pyramids without the 1:2:4 spatial ratio, and configuration values out
    of range.
    """
    pass


class ProcessingError(SketchSaliencyError):
    """
    A computation ran but produced nothing usable.

    Raised when attention is accumulated over zero valid decoding steps and
    when a training step yields a non-finite loss or parameter update.
    """
    pass


class InvalidSketch(ValidationError):
    """Sketch geometry is empty, non-finite or otherwise unusable."""


class UnsupportedTransform(ValidationError):
    """Affine transform kind is unknown or not invertible."""


class SequenceTooLong(ValidationError):
    """Stroke sequence exceeds the maximum decoding length."""


class DegenerateDataset(ValidationError):
    """Offset statistics cannot be computed (e.g. all offsets are zero)."""


class ConfigError(ValidationError):
    """Configuration values are invalid or inconsistent."""


class UsageError(ValidationError):
    """Command-line usage problem (conflicting flags, refused overwrite)."""


class ShapeError(ValidationError):
    """Tensor or array shapes violate a module contract."""


class InvalidParams(ValidationError):
    """Mixture parameters violate their invariants."""


class UndefinedMetric(ValidationError):
    """Metric is undefined for the given input (e.g. empty ground truth)."""


class ManifestError(FileSystemError):
    """Dataset manifest is missing, malformed or references absent files."""


class CheckpointError(FileSystemError):
    """Checkpoint archive is missing, corrupt or built for another model."""


class EmptyAccumulation(ProcessingError):
    """No valid decoding steps were available to accumulate attention."""


class TrainingError(ProcessingError):
    """Training produced a non-finite loss or parameter."""


# Context keys rendered first, in this order, with their labels
LEADING_KEYS = (
    ("file_path", "File"),
    ("dependency", "Resource"),
    ("operation", "Operation"),
    ("cause", "Cause"),
)


def format_error_message(message: str, context: Dict[str, Any]) -> str:
    """
    Render a message and its context as indented "Label: value" lines.

    Known keys (file_path, dependency, operation, cause) come first; any
    other key follows in insertion order with a Title-Cased label.

    Example:
        >>> format_error_message(
        ...     "Manifest references a missing photo",
        ...     {"file_path": "/data/manifest.json", "operation": "load_manifest", "photo": "0001.png"}
        ... )
        'Error: Manifest references a missing photo\\n  File: /data/manifest.json\\n  Operation: load_manifest\\n  Photo: 0001.png'
    """
    lines = [f"Error: {message}"]
    leading = dict(LEADING_KEYS)
    for key, label in LEADING_KEYS:
        if key in context:
            lines.append(f"  {label}: {context[key]}")
    for key, value in context.items():
        if key not in leading:
            lines.append(f"  {key.replace('_', ' ').title()}: {value}")
    return "\n".join(lines)

"""
Unit tests for error handling infrastructure.
"""

import pytest
from src.errors import (
    CheckpointError,
    ConfigError,
    DependencyError,
    EmptyAccumulation,
    FileSystemError,
    InvalidSketch,
    ManifestError,
    ProcessingError,
    SketchSaliencyError,
    TrainingError,
    UndefinedMetric,
    UsageError,
    ValidationError,
    format_error_message,
)


class TestErrorFormatting:
    """Test error message formatting with context."""

    def test_format_error_with_file_path(self):
        """Test error formatting includes file path."""
        result = format_error_message("Manifest not found", {"file_path": "/data/manifest.json"})

        assert "Error: Manifest not found" in result
        assert "File: /data/manifest.json" in result

    def test_format_error_with_dependency(self):
        """Test error formatting includes the external resource."""
        result = format_error_message("Weight file rejected", {"dependency": "VGG-16 weights"})

        assert "Resource: VGG-16 weights" in result

    def test_format_error_with_all_context(self):
        """Test error formatting orders the well-known fields first."""
        context = {
            "sketch_idx": 12,
            "file_path": "/data/manifest.json",
            "operation": "load_manifest",
            "cause": "index out of range",
        }
        lines = format_error_message("Sketch index out of range", context).split("\n")

        assert lines == [
            "Error: Sketch index out of range",
            "  File: /data/manifest.json",
            "  Operation: load_manifest",
            "  Cause: index out of range",
            "  Sketch Idx: 12",
        ]

    def test_format_error_empty_context(self):
        """Test error formatting with no context."""
        assert format_error_message("Something went wrong", {}) == "Error: Something went wrong"


class TestErrorClasses:
    """Test the exception classes carry their context."""

    def test_error_message_and_context(self):
        """Test str() renders the formatted message and context stays accessible."""
        error = TrainingError("Non-finite loss", {"operation": "train", "step": 7})

        assert "Error: Non-finite loss" in str(error)
        assert "Operation: train" in str(error)
        assert "Step: 7" in str(error)
        assert error.context["step"] == 7
        assert error.message == "Non-finite loss"

    def test_error_without_context(self):
        """Test a missing context becomes an empty dict."""
        error = InvalidSketch("Sketch is empty")

        assert error.context == {}
        assert str(error) == "Error: Sketch is empty"


class TestErrorInheritance:
    """Test the error hierarchy."""

    @pytest.mark.parametrize("cls", [FileSystemError, DependencyError, ValidationError, ProcessingError])
    def test_all_errors_inherit_from_base(self, cls):
        """Test that every category derives from SketchSaliencyError."""
        assert issubclass(cls, SketchSaliencyError)
        assert issubclass(cls, Exception)

    def test_usage_and_config_errors_are_validation_errors(self):
        """Test usage problems share the validation branch (exit code 2)."""
        assert issubclass(UsageError, ValidationError)
        assert issubclass(ConfigError, ValidationError)
        assert issubclass(UndefinedMetric, ValidationError)

    def test_file_and_processing_branches(self):
        """Test archive errors are file system errors and runtime failures are processing errors."""
        assert issubclass(ManifestError, FileSystemError)
        assert issubclass(CheckpointError, FileSystemError)
        assert issubclass(EmptyAccumulation, ProcessingError)
        assert issubclass(TrainingError, ProcessingError)

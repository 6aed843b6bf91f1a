"""Command-line entry points."""

from .main import EXIT_OK, EXIT_RUNTIME, EXIT_SELFTEST, EXIT_VALIDATION, build_parser, main

__all__ = ["EXIT_OK", "EXIT_RUNTIME", "EXIT_SELFTEST", "EXIT_VALIDATION", "build_parser", "main"]

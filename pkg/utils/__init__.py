"""Run-log capture, version strings and report summary helpers."""

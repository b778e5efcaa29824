"""Learned per-image visible watermarks, baseline stampers and an accuracy-drop harness."""

__version__ = "0.1.0"

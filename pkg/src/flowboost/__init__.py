"""Closed-loop flow-matching search for extremal point configurations."""
from __future__ import annotations

__version__ = "0.1.0"

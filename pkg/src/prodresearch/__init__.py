"""Persona-driven product research trajectory synthesis, refinement and RACE evaluation."""

from __future__ import annotations

__version__ = "0.1.0"

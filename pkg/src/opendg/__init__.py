"""Open domain generalization on synthetic multi-domain problems."""

from __future__ import annotations

__version__ = "0.1.0"

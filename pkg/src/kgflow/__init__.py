"""Knowledge-graph reasoning with unconscious, conscious and attention flows."""

__version__ = "0.1.0"

"""Publication-style figures from pzpump CSV outputs."""

__version__ = "0.1.0"

"""Time-aware longitudinal stress prediction from irregular EMA self-reports."""

__version__ = "0.1.0"

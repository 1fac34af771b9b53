"""Bidirectional joint multi-intent detection and slot filling (BiSLU), built on a
small numpy autodiff engine."""

__version__ = "0.1.0"

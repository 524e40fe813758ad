"""Offline figure rendering for mapa-lab experiment artifacts."""

__version__ = "0.1.0"

from .render import FigureSpec, SchemaError, build_figure, render

__all__ = ["FigureSpec", "SchemaError", "build_figure", "render", "__version__"]

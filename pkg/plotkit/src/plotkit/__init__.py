"""Figure rendering for the training lab's CSV outputs."""

from .figures import KINDS, FigureSpec, build_figure, render

__all__ = ["KINDS", "FigureSpec", "build_figure", "render"]
__version__ = "0.1.0"

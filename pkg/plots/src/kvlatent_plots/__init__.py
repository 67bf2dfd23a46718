from .render import FigureSpec, RaggedGridError, render

__version__ = "0.1.0"

from .figures import FigureError, FigureSpec, pearson_label, render

__all__ = ["FigureError", "FigureSpec", "pearson_label", "render"]

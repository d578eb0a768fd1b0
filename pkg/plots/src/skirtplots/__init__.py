"""Figure generation for link-simulation results."""

from .figures import PlotSpec, build_figure, main, render

__all__ = ["PlotSpec", "build_figure", "main", "render"]

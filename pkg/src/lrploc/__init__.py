"""Speech source localisation networks and layer-wise relevance analysis on simulated rooms."""

__version__ = "0.1.0"

"""Grid-scale battery + co-located solar: simulation, control and evaluation."""

__version__ = "0.1.0"

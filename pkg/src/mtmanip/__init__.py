"""Multi-task grasp / push / poke learning on a synthetic planar world."""

__version__ = "0.1.0"

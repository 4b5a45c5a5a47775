"""Open-world shape detector: probabilistic objectness with decoupled query
initialization and an early-stopped objectness schedule, on a synthetic
shape-world benchmark with incremental known/unknown tasks."""

__version__ = "0.1.0"

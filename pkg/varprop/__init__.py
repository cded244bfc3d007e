"""Sample-statistic propagation in randomly initialized ReLU networks."""

__version__ = "0.3.0"

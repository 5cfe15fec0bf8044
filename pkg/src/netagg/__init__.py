"""netagg: packet-level simulation and cost models for in-network gradient
aggregation on RoCE-style fabrics."""

__version__ = "0.1.0"

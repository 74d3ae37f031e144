"""Multi-scenario cold-start ranking: behaviour features, gated multi-task
network, calibration metrics and stability-aware daily promotion."""

__version__ = "0.1.0"

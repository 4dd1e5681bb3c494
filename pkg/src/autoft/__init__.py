"""DCN click-through-rate models with AutoFT per-instance fine-tuning routes."""

__version__ = "0.1.0"

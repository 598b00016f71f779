"""Stdio JSON backend bridge over Hugging Face causal-LM inference."""

__version__ = "0.1.0"

from .server import BridgeConfig, HfBackend, serve

__all__ = ["BridgeConfig", "HfBackend", "serve"]

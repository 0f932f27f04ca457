"""Checkpoint-to-toolkit bridge: KTAC/KTWT export for pretrained decoders."""

__version__ = "0.1.0"

from .export import export_activations, export_weights, verify_manifest

__all__ = ["export_activations", "export_weights", "verify_manifest"]

"""Multi-scale cross-modal transformer encoder for audio-visual deepfake detection."""

__version__ = "0.1.0"

"""Climate-aware multimodal credit default modelling at desk scale."""

__version__ = "0.1.0"

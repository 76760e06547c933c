"""replica-lab: local image translation and conjunct-attention detection on synthetic phantoms."""

__version__ = "0.1.0"

"""Toy-scale laboratory for emotion-conditioned diffusion synthesis, kernel domain adaptation and emotion diarization metrics."""

__version__ = "0.1.0"

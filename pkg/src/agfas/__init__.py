"""Diffusion-generated anomalous cues for domain-generalised face anti-spoofing, at desk scale."""

__version__ = "0.1.0"

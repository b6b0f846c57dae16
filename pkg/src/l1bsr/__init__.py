"""Self-supervised x2 super-resolution and cross-spectral band alignment
for 4-band (B, G, R, N) imagery with misaligned bands."""

__version__ = "0.1.0"

"""Codec-robust anti-spoofing front-ends: band trimming, Chebyshev low-pass
filtering and bandwidth extension ahead of a small pooling classifier."""

from .signal import AudioBuffer, Spectrogram

__all__ = ["AudioBuffer", "Spectrogram"]
__version__ = "0.1.0"

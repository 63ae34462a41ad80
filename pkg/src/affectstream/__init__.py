"""Continuous valence/arousal regression from face video: key-frame selection,
eye/mouth optical flow, temporal Gaussian attention and CCC training."""

__version__ = "0.1.0"

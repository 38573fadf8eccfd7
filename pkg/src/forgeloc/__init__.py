"""Image forgery detection and localization with a learned noise fingerprint,
dual-branch fusion, confidence maps and a confidence-weighted detector."""

__version__ = "0.1.0"

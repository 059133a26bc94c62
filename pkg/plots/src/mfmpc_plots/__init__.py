"""Figure rendering for mfmpc run artifacts."""

__version__ = "0.1.0"

"""Learning classifiers from labeling rules coupled with labeled exemplars."""

__version__ = "0.1.0"

"""Static malware-variant detection over lifted assembly listings."""

__version__ = "0.1.0"

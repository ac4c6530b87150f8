"""Flow-level simulator of collective-communication fault diagnosis and traffic engineering."""

__version__ = "0.1.0"

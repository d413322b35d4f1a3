"""One-shot voice conversion with prosody transfer and weight-regularised adaptation."""

__version__ = "0.1.0"

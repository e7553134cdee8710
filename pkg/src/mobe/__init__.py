"""Multi-subject brain decoding with mixture-of-brain-expert adapters."""

__version__ = "0.1.0"

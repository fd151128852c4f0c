"""Parameter-efficient adapters and multi-modal prompts on a frozen dual
encoder for video facial-expression classification."""

__version__ = "0.1.0"

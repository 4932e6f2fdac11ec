"""Speaker-preserving direct speech-to-speech translation via discrete units."""

__version__ = "0.1.0"

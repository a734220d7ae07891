"""Parameter-space alignment of visual features into a toy decoder LM."""

__version__ = "0.1.0"

"""Territory-aware image retrieval and retrieval-augmented report generation for DWI/ADC volumes."""

__version__ = "0.1.0"

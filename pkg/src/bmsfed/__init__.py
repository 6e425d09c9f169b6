"""bmsfed - Balanced modality selection for multi-modal federated learning."""

__version__ = "0.1.0"

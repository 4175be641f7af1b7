"""Next-POI prediction with a gated mixture of Transformer and LSTM experts."""

__version__ = "0.1.0"

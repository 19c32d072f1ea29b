"""Small-scale laboratory for clipped and normalized clipped softmax attention
and simulated W8A8 quantization of tiny transformers."""

__version__ = "0.1.0"

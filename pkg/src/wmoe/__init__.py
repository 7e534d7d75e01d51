"""Zero-shot anomaly detection with variational prompts, wavelet cross-attention and MoE scoring."""

__version__ = "0.1.0"

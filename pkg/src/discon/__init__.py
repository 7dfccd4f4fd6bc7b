"""Two-stage generative pipeline on synthetic mixture data: a discrete
autoregressive prior whose token sequences condition a masked continuous
autoregressive model with a per-token diffusion head."""

__version__ = "0.1.0"

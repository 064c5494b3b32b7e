"""Multimodal biLM embeddings with acoustic gating, built on a small autodiff core."""

__version__ = "0.1.0"

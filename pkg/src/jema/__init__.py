"""Metadata-aligned multimodal co-learning for melt-pool monitoring."""

"""Preference-oriented fine-tuning laboratory: tiny transformers, reference
scoring, PoFT/CE/bi-PoFT/DPO objectives and the experiments around them."""

__version__ = "0.1.0"

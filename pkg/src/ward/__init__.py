"""Discharge-letter section generation: segmentation, length targeting, prompting and evaluation."""

__version__ = "0.1.0"

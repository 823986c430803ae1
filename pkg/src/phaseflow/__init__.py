"""Multimodal surgical phase recognition: DSP front end, GMU fusion, MS-TCN models."""

__version__ = "0.1.0"

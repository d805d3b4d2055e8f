"""Lung patch-montage toolkit: segmentation, prompt-driven patch retrieval,
zero-shot classification, contrastive domain adaptation, and reader-study
agreement analysis over volumetric scans."""

__version__ = "0.1.0"

"""Label-map preparation, synthesis, resampling, ensembling, evaluation and
volumetry tools for whole-brain segmentation and cortex parcellation."""

__version__ = "0.1.0"

"""Post-training toolkit for ensembled document-layout segmentation.

Pipeline stages: fold splitting, document-image degradation, multi-model
prediction fusion (per-pixel majority voting and class-agnostic NMS),
Bayesian threshold tuning, and dice / mAP / confusion-matrix evaluation.
"""

__version__ = "0.1.0"

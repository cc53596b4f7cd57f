"""
HEML - Hierarchical Explainable Metric Learning
Bottom-up metric learning over data segments with per-node explanations
"""

__version__ = "1.0.0"
__description__ = "Hierarchical metric learning with SNR-distance metric trees"

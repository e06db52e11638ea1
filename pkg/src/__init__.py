"""
Prostate DWI transfer-learning segmentation workbench
"""

__version__ = "0.2.0"

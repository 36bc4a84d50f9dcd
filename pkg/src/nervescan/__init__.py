"""Nerve localization and segmentation in ultrasound frame sequences.

CNN patch classification with a high-confidence rule, spatial overlap
clustering, temporal consistency scoring, and a GVF snake for delineation.
"""

__version__ = "0.1.0"

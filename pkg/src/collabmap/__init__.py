"""Collaborative multi-agent sparse mapping: offline SfM, on-the-fly server SfM and collaborative SLAM."""

__version__ = "0.1.0"

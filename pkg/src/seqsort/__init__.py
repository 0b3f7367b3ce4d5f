"""Cardiac MR series sorting: DICOM ingestion, a two-head CNN for sequence and
plane classification, training, evaluation and directory sorting."""

__version__ = "0.1.0"

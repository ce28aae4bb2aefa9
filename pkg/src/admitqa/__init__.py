"""Hybrid-retrieval QA engine for university admissions counseling."""

__version__ = "0.1.0"

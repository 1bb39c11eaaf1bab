"""Inherent quantum noise as a differential-privacy mechanism for variational classifiers."""

__version__ = "0.1.0"

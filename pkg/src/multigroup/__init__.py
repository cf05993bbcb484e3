"""Multi-group learning with prepend-style learners and sparse-vector noise."""

__version__ = "0.1.0"

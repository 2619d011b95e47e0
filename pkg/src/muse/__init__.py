"""Multi-scale dense self-distillation for nucleus detection and
classification, self-contained at desk scale."""

__version__ = "0.1.0"

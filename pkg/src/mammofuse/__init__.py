"""Multi-task mammography pipeline: task models, patient-level fusion and evaluation."""

__version__ = "0.1.0"

"""Desk-scale vision-language pre-training and teacher-student distillation on numpy."""

__version__ = "0.1.0"

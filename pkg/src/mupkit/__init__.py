"""Desk-scale transferable adversarial attacks with surrogate parameter masking."""

__version__ = "0.1.0"

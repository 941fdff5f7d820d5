"""Desk-scale text-based person search: matching, prototype decoupling,
cross-modal re-identification losses, confidence fusion and evaluation
over a seeded synthetic world."""

__version__ = "0.1.0"

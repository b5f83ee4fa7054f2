"""Visual state-only adversarial imitation with relational (non-local) blocks."""

__version__ = "0.1.0"

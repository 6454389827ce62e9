"""Conditional human-action video synthesis with a learned motion generator and a
gated recurrent integrator of appearance and motion features."""

__version__ = "0.1.0"

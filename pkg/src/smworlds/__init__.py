"""Simulation and analysis tools for the matter-density many-worlds theory
(Schrodinger evolution plus the matter density m(x, t)), with comparisons
against single-world ontologies."""

__version__ = "0.1.0"

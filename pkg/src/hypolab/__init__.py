"""hypolab: numerical laboratory for kinetic Fokker-Planck semigroups in weighted spaces."""

__version__ = "0.1.0"

"""Mixed FEM simulation of waves in composite elastic/viscoelastic media."""

__version__ = "0.1.0"

"""Zero-dimensional Li-S cell model as a semi-explicit index-1 DAE, with a
plant simulator, descriptor-system observability analysis and an extended
Kalman filter for DAE systems."""

__version__ = "0.1.0"

"""Battery parameter identification from dynamic load records: reference
SPMe simulator, physics-embedded neural surrogate, fixed-point parameter
updates, and a CMA-ES baseline."""

__version__ = "0.1.0"

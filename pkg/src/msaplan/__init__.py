"""Load-balance planning and performance simulation for spectral-element runs on
modular CPU/GPU supercomputers."""

__version__ = "0.1.0"

"""
SK spin-glass lab: Glauber dynamics, gapped states and exact spectral bottlenecks
"""
__version__ = "1.0.0"

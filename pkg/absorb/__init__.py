"""
Absorbing discrete diffusion over residual vector quantized codes.
"""
__version__ = '0.1.0'

"""
OmbreNet - Suppression d'ombres en deux etapes guidee par le contexte.
"""

__version__ = "1.0.0"
__author__ = "REBELOI"

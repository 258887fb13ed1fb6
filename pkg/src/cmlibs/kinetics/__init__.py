"""
Reaction rate estimation for metastable stochastic systems.
"""
import importlib.metadata

try:
    __version__ = importlib.metadata.version("cmlibs.kinetics")
except importlib.metadata.PackageNotFoundError:
    __version__ = "0.0.0"

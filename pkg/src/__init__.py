"""Two-stream aural-visual affect recognition pipeline"""

__version__ = "0.1.0"

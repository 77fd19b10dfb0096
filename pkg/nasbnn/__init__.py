"""
NAS-BNN - Binary neural architecture search toolkit
Weight-sharing supernet training, OPs accounting and evolutionary Pareto search
"""

__version__ = "1.0.0"
__author__ = "NAS-BNN Team"
__description__ = "Search, train and deploy binary neural networks"


class NasBnnError(Exception):
    """Base class for every error raised by the toolkit."""
    pass

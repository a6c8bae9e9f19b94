"""Few-shot detection with negative and positive representatives.

The package trains a small metric-learning embedding network with two
heads (negative / positive) on a synthetic episodic detection world and
evaluates few-shot inference that uses both kinds of class representatives.
"""

__version__ = "0.1.0"

"""Dual transfer learning for long-tail item recommendation: a two-tower
base learner, a few-shot to many-shot parameter meta-mapper and a
long-tail-aware training curriculum, with baselines and sliced metrics.
"""

__version__ = "0.1.0"

"""Adaptive model-predictive control with learned dynamics priors.

Local linear-Gaussian dynamics are re-estimated every control tick by
fusing a global prior (Gaussian, mixture, or neural network) with
exponentially forgotten statistics of recent transitions, then used by a
short-horizon iLQR planner.
"""

__version__ = "0.1.0"

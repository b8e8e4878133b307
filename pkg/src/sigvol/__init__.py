"""Signature-based stochastic volatility toolkit.

Precomputes truncated-signature sample stores of an augmented primary
process, prices VIX and SPX options as quadratic/linear forms in the model
parameters, and calibrates those parameters jointly to option quote books.
"""

__version__ = "0.1.0"

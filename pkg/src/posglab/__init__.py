"""POS-guided softmax language modelling and two-stage sampling at desk scale."""

__version__ = "0.1.0"

"""Optimal first-order method design via certified QCQP solves."""

__version__ = "0.1.0"

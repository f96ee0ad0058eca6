"""Arm pose tracking from a smartwatch and phone with a learned ensemble Kalman filter."""

__version__ = "0.1.0"

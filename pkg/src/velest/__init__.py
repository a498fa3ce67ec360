"""Velocity estimation for aggressive RC-car driving.

An unscented Kalman filter over interchangeable single-track vehicle
dynamics models whose parameters — physical, neural, and noise — are
trained by backpropagating the estimation loss through the filter.
"""

__version__ = "0.1.0"

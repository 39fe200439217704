"""Learned self-assessment for a fault-tolerant lane-change controller.

The package simulates lane-change tracking of a four-wheel over-actuated
vehicle under actuator degradations, learns a quantile predictor of the
maximum lateral tracking deviation, calibrates it with split-conformal
correction, and gates candidate maneuvers against the free lateral space
of the current road segment.
"""

__version__ = "0.1.0"

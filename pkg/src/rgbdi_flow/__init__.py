"""Camera velocity estimation from depth images and an IMU.

Dense range-flow constraints from consecutive depth frames are fused with
preintegrated inertial measurements in a sliding-window least-squares
problem over per-frame twists, gravity direction and IMU biases.
"""
__version__ = "0.1.0"

"""Radio-aided inertial navigation toolkit.

Core estimation (fixed-lag factor-graph smoother, ESKF benchmark), aiding
measurement models for phased-array angle-of-arrival, range, GNSS and
barometer, and a synthetic multirotor scenario harness.
"""

__version__ = "0.1.0"

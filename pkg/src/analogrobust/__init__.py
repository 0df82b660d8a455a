"""Adversarial robustness of DNN inference on noisy analog in-memory-compute hardware.

A numpy simulator of crossbar tiles (converters, programming and read noise,
output noise, conductance drift), five deployment platforms, gradient and
query-based attacks, a hardware-in-the-loop driver and the studies built on
top of them.
"""

__version__ = "0.1.0"

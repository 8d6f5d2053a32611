"""tinydeploy: compress small ConvNets and plan their deployment on
heterogeneous CPU/NPU microcontrollers, then budget the downlink savings
of confidence-filtered onboard inference."""

__version__ = "0.1.0"

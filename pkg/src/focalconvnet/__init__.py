"""FocalConvNet: hybrid convolution + focal-modulation image classifier on a numpy autodiff core."""

__version__ = "0.1.0"

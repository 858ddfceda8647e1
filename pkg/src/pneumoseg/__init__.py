"""ResNet34-UNet segmentation with two-stage training, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

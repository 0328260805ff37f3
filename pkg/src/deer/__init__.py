"""Detection-agnostic end-to-end scene text spotting on a numpy autodiff core."""

__version__ = "0.1.0"

"""kklobs: train, run and certify KKL observers for controlled nonlinear systems."""

__version__ = "0.1.0"

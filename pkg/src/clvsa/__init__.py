"""Convolutional LSTM with variational sequence-to-sequence attention for
intraday direction prediction, plus data prep, training and backtesting."""

__version__ = "0.1.0"

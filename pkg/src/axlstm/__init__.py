"""AxLSTM: self-supervised audio representations from masked spectrogram patches with mLSTM blocks."""

__version__ = "0.1.0"

"""Audio in, encoder-ready patch sequences out."""

from .audio import SAMPLE_RATE, UnsupportedCodecError, WavParseError, load_wav, resample_linear, write_wav
from .features import (
    HOP_LENGTH, LOG_FLOOR, N_MELS, Spectrogram, load_spectrogram, logmel, mel_centers,
    mel_filterbank, save_spectrogram,
)
from .patches import (
    MaskPlan, PatchConfig, PatchSequence, PatchShapeError, build_encoder_input, empty_plan,
    mask_count, patchify, posemb_2d, posemb_with_cls, sample_mask, sample_mask_batch, unpatchify,
)

__all__ = [
    "SAMPLE_RATE", "UnsupportedCodecError", "WavParseError", "load_wav", "resample_linear", "write_wav",
    "HOP_LENGTH", "LOG_FLOOR", "N_MELS", "Spectrogram", "load_spectrogram", "logmel", "mel_centers",
    "mel_filterbank", "save_spectrogram",
    "MaskPlan", "PatchConfig", "PatchSequence", "PatchShapeError", "build_encoder_input", "empty_plan",
    "mask_count", "patchify", "posemb_2d", "posemb_with_cls", "sample_mask", "sample_mask_batch",
    "unpatchify",
]

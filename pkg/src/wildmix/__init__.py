"""Monaural source separation with a spectro-temporal transformer, built on numpy."""
from .audio_io import Corpus, CorpusSpec, PcmClip, gen_synthetic_corpus, read_wav, write_wav
from .dsp import Spectrogram, StftParams, istft, stft
from .forge import SubdatasetId, build_subdataset
from .stt import SttConfig, SttModel

__version__ = "0.1.0"

__all__ = [
    "Corpus", "CorpusSpec", "PcmClip", "Spectrogram", "StftParams", "SttConfig", "SttModel",
    "SubdatasetId", "build_subdataset", "gen_synthetic_corpus", "istft", "read_wav", "stft",
    "write_wav",
]

"""
Incremental log-mel frontend
A frame is emitted as soon as its analysis window is complete
"""

from dataclasses import dataclass
from typing import List

import librosa
import numpy as np


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_length_ms: int = 40
    frame_shift_ms: int = 10
    fft_size: int = 1024
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.frame_length_ms <= self.frame_shift_ms:
            raise ValueError("frame length must exceed frame shift")
        if self.fft_size < self.frame_length:
            raise ValueError(f"fft_size {self.fft_size} is shorter than the {self.frame_length}-sample window")

    @property
    def frame_length(self) -> int:
        return self.sample_rate * self.frame_length_ms // 1000

    @property
    def frame_shift(self) -> int:
        return self.sample_rate * self.frame_shift_ms // 1000

    @property
    def lookahead_ms(self) -> int:
        """Window overhang beyond the current shift and the next one"""
        return self.frame_length_ms - 2 * self.frame_shift_ms

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_length:
            return 0
        return (num_samples - self.frame_length) // self.frame_shift + 1

    def num_samples(self, num_frames: int) -> int:
        """Samples spanned by num_frames overlapping windows"""
        if num_frames == 0:
            return 0
        return (num_frames - 1) * self.frame_shift + self.frame_length


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """(F, fft_size // 2 + 1) HTK-style triangles with unit peaks"""
    return librosa.filters.mel(sr=cfg.sample_rate, n_fft=cfg.fft_size, n_mels=cfg.mel_bins,
                               fmin=cfg.fmin, fmax=cfg.fmax, htk=True, norm=None)


def mel_centres(cfg: FrontendConfig) -> np.ndarray:
    """Centre frequency (Hz) of every mel band"""
    return librosa.mel_frequencies(cfg.mel_bins + 2, fmin=cfg.fmin, fmax=cfg.fmax, htk=True)[1:-1]


def to_float(pcm: np.ndarray) -> np.ndarray:
    """16-bit integer pcm is scaled to [-1, 1); float input is taken as is"""
    pcm = np.asarray(pcm)
    if pcm.dtype == np.int16:
        return pcm.astype(np.float64) / 32768.0
    return pcm.astype(np.float64)


class MelFrontend:
    """Stateful framing; pushing audio in any split yields the same frames"""

    def __init__(self, cfg: FrontendConfig = FrontendConfig()):
        self.cfg = cfg
        self.window = librosa.filters.get_window("hann", cfg.frame_length, fftbins=True)
        self.filterbank = mel_filterbank(cfg)
        self._buffer = np.zeros(0)
        self.frames_emitted = 0
        self.samples_seen = 0

    def frame_to_mel(self, frame: np.ndarray) -> np.ndarray:
        spectrum = np.abs(np.fft.rfft(frame * self.window, n=self.cfg.fft_size))
        return np.log(np.maximum(self.filterbank @ spectrum, self.cfg.log_floor))

    def push(self, pcm: np.ndarray) -> np.ndarray:
        """Returns the (k, F) float32 frames completed by this piece of audio"""
        samples = to_float(pcm).ravel()
        self.samples_seen += samples.size
        self._buffer = np.concatenate([self._buffer, samples])

        frames: List[np.ndarray] = []
        length, shift = self.cfg.frame_length, self.cfg.frame_shift
        start = 0
        while start + length <= self._buffer.size:
            frames.append(self.frame_to_mel(self._buffer[start:start + length]))
            start += shift
        self._buffer = self._buffer[start:]
        self.frames_emitted += len(frames)

        if not frames:
            return np.zeros((0, self.cfg.mel_bins), dtype=np.float32)
        return np.stack(frames).astype(np.float32)


def mel_frontend(pcm: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Offline framing of a whole signal"""
    return MelFrontend(cfg).push(pcm)

"""
Deterministic mel-inversion vocoder
Log-mel -> linear magnitude (regularised pseudo-inverse) -> fast Griffin-Lim from a seeded random phase
"""

import librosa
import numpy as np

from core.errors import ShapeError
from streaming.frontend import FrontendConfig, mel_filterbank


class MelVocoder:
    def __init__(self, cfg: FrontendConfig = FrontendConfig(), iterations: int = 32,
                 regularisation: float = 1e-3, momentum: float = 0.99, seed: int = 0):
        self.cfg = cfg
        self.iterations = iterations
        self.momentum = momentum
        self.seed = seed
        basis = mel_filterbank(cfg)
        gram = basis @ basis.T
        # B^T (B B^T + lambda I)^-1
        self.inverse = basis.T @ np.linalg.inv(gram + regularisation * np.eye(gram.shape[0]))
        self.window = librosa.filters.get_window("hann", cfg.frame_length, fftbins=True)
        # the analysis window sits centred inside each fft frame on resynthesis
        self._offset = (cfg.fft_size - cfg.frame_length) // 2

    def magnitudes(self, mel: np.ndarray) -> np.ndarray:
        """(fft_size // 2 + 1, T_m) non-negative linear magnitudes"""
        return np.maximum(self.inverse @ np.exp(np.asarray(mel, dtype=np.float64).T), 0.0)

    def __call__(self, mel: np.ndarray) -> np.ndarray:
        """(T_m, F) log-mel -> (T_m - 1) * shift + frame_length float32 samples"""
        mel = np.asarray(mel)
        if mel.ndim != 2 or mel.shape[1] != self.cfg.mel_bins:
            raise ShapeError(f"vocoder expects (T_m, {self.cfg.mel_bins}) mel, got {mel.shape}")
        num_frames = mel.shape[0]
        if num_frames == 0:
            return np.zeros(0, dtype=np.float32)

        audio = librosa.griffinlim(
            self.magnitudes(mel),
            n_iter=self.iterations,
            hop_length=self.cfg.frame_shift,
            win_length=self.cfg.frame_length,
            n_fft=self.cfg.fft_size,
            window=self.window,
            center=False,
            momentum=self.momentum,
            init="random",
            random_state=self.seed,
        )
        wanted = self.cfg.num_samples(num_frames)
        audio = audio[self._offset:self._offset + wanted]
        if audio.size < wanted:
            audio = np.pad(audio, (0, wanted - audio.size))
        return audio.astype(np.float32)

"""
Chunked streaming conversion session

Audio is pushed in small pieces. Every chunk_frames mel frames the encoder
runs on its caches, completed downsampling windows become codes, and the
decoder converts the frames whose codes are known. In full mode the decoder
chunk is extended with LM pseudo context; those rows shape the current
chunk and the cross-fade tail but are never emitted or cached.
"""

import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

from core.errors import ConfigError, SessionClosedError, ShapeError
from models.acoustic import AcousticModel
from models.context_lm import BOS, ContextLM, SamplingConfig
from streaming.frontend import FrontendConfig, MelFrontend
from streaming.vocoder import MelVocoder

MODES = ("full", "standalone")


@dataclass(frozen=True)
class StreamConfig:
    mode: str = "standalone"
    chunk_frames: int = 2
    pseudo_frames: int = 2
    crossfade_ms: int = 20
    vocoder_context: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"stream mode must be one of {MODES}, got '{self.mode}'")
        if self.chunk_frames < 1 or self.pseudo_frames < 0 or self.crossfade_ms < 0:
            raise ConfigError("chunk_frames must be >= 1, pseudo_frames and crossfade_ms >= 0")


@dataclass
class ChunkTiming:
    am_ms: float = 0.0
    lm_ms: float = 0.0
    vocoder_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.am_ms + self.lm_ms + self.vocoder_ms


@dataclass(frozen=True)
class Emission:
    """Absolute sample range [start, end) written to the output, and how it was made"""
    start: int
    end: int
    kind: str   # "crossfade", "real" or "tail"
    pseudo_samples: int = 0   # samples of the range covered by vocoded pseudo frames


class StreamSession:
    def __init__(self, model: AcousticModel, speaker_id: int, cfg: StreamConfig = StreamConfig(),
                 lm: Optional[ContextLM] = None, sampling: SamplingConfig = SamplingConfig(),
                 frontend: FrontendConfig = FrontendConfig(), vocoder: Optional[MelVocoder] = None,
                 verbose: bool = False):
        if cfg.mode == "full" and lm is None:
            raise ConfigError("full mode needs a context LM")
        if frontend.mel_bins != model.cfg.mel_bins:
            raise ShapeError(f"frontend makes {frontend.mel_bins} bins, model expects {model.cfg.mel_bins}")
        self.model = model.eval()
        self.cfg = cfg
        self.lm = lm.eval() if cfg.mode == "full" else None
        self.sampling = sampling
        self.frontend_cfg = frontend
        self.frontend = MelFrontend(frontend)
        self.vocoder = vocoder or MelVocoder(frontend)
        self.verbose = verbose

        with torch.no_grad():
            self.speaker = model.speakers.lookup(speaker_id)
        self.encoder_caches = model.encoder.new_caches()
        self.decoder_caches = model.decoder.new_caches()
        self.lm_state = None
        self._generator = torch.Generator().manual_seed(sampling.seed)
        if self.lm is not None:
            with torch.no_grad():
                _, self.lm_state = self.lm.lm_forward(torch.tensor([BOS]))

        self._pending: List[np.ndarray] = []
        self._unpooled: List[torch.Tensor] = []
        self.codes: List[int] = []
        self._converted: List[torch.Tensor] = []
        self.encoded_frames = 0
        self.decoded_frames = 0
        self.emitted_samples = 0
        self._tail: Optional[np.ndarray] = None
        self.emissions: List[Emission] = []
        self._tail_pseudo: Optional[Tuple[int, int]] = None
        self.timings: List[ChunkTiming] = []
        self._owed = ChunkTiming()
        self.closed = False

    @property
    def chunk_ms(self) -> float:
        return self.cfg.chunk_frames * self.frontend_cfg.frame_shift_ms

    @property
    def crossfade_samples(self) -> int:
        return self.frontend_cfg.sample_rate * self.cfg.crossfade_ms // 1000

    @property
    def converted_mel(self) -> np.ndarray:
        if not self._converted:
            return np.zeros((0, self.model.cfg.mel_bins), dtype=np.float32)
        return torch.cat(self._converted).numpy()

    def push(self, pcm: np.ndarray) -> Optional[np.ndarray]:
        """Feed audio; returns the converted samples that became final, if any"""
        self._check_open()
        return self.push_mel(self.frontend.push(pcm))

    def push_mel(self, frames: np.ndarray) -> Optional[np.ndarray]:
        """Feed mel frames directly, bypassing the audio frontend"""
        self._check_open()
        self._pending.extend(np.asarray(frames, dtype=np.float32))
        return self._advance(final=False)

    def flush(self) -> Optional[np.ndarray]:
        """Convert every remaining frame, emit the closing tail and close the session"""
        self._check_open()
        pieces = [self._advance(final=True)]
        if self.decoded_frames:
            pieces.append(self._closing_tail())
        self.closed = True
        pieces = [p for p in pieces if p is not None and p.size]
        return np.concatenate(pieces) if pieces else None

    def _check_open(self) -> None:
        if self.closed:
            raise SessionClosedError("session already flushed")

    @torch.no_grad()
    def _advance(self, final: bool) -> Optional[np.ndarray]:
        """Encode one chunk at a time and decode whatever it made due, so output never depends on push sizes"""
        c = self.cfg.chunk_frames
        pieces: List[np.ndarray] = []
        while len(self._pending) >= c or (final and self._pending):
            width = min(c, len(self._pending))
            chunk = torch.from_numpy(np.stack(self._pending[:width]))
            del self._pending[:width]
            last = final and not self._pending
            started = time.perf_counter()
            lm_before = self._owed.lm_ms
            z, self.encoder_caches = self.model.encoder.forward_streaming(
                self.model.encoder_in(chunk), self.encoder_caches)
            self._unpooled.append(z)
            self.encoded_frames += width
            self._pool_codes(last)
            self._owed.am_ms += 1000 * (time.perf_counter() - started) - (self._owed.lm_ms - lm_before)
            pieces.extend(self._decode_due(last))
        if final:
            started = time.perf_counter()
            self._pool_codes(True)
            self._owed.am_ms += 1000 * (time.perf_counter() - started)
            pieces.extend(self._decode_due(True))
        return np.concatenate(pieces) if pieces else None

    def _decode_due(self, final: bool) -> List[np.ndarray]:
        """Decode every chunk whose codes are known; each gets its own timing and a share of the encoder time"""
        c = self.cfg.chunk_frames
        available = min(len(self.codes) * self.model.cfg.downsample, self.encoded_frames)
        widths = []
        start = self.decoded_frames
        while start + c <= available or (final and start < available):
            widths.append(min(c, available - start))
            start += widths[-1]
        if not widths:
            return []

        owed, self._owed = self._owed, ChunkTiming()
        pieces = []
        for width in widths:
            timing = ChunkTiming(am_ms=owed.am_ms / len(widths), lm_ms=owed.lm_ms / len(widths))
            pieces.append(self._decode_chunk(width, available, pseudo=not final, timing=timing))
            self.timings.append(timing)
        return pieces

    def _pool_codes(self, final: bool) -> None:
        r = self.model.cfg.downsample
        rows = torch.cat(self._unpooled) if self._unpooled else None
        if rows is None:
            return
        full = rows.size(0) // r
        take = full * r
        if final and rows.size(0) > take:
            take = rows.size(0)
        if take == 0:
            return
        new_codes = self.model.discretize(self.model.downsample_project(rows[:take])).codes.tolist()
        self._unpooled = [rows[take:]] if take < rows.size(0) else []
        for code in new_codes:
            self.codes.append(int(code))
            if self.lm is not None:
                lm_started = time.perf_counter()
                self._lm_observe()
                self._owed.lm_ms += 1000 * (time.perf_counter() - lm_started)

    def _lm_observe(self) -> None:
        """Advance the LM state by the newest real code, rolling the window when full"""
        max_context = self.lm.cfg.max_context
        if self.lm_state.position + 1 + self.cfg.pseudo_frames > max_context:
            keep = max_context // 2
            self.lm_state = self.lm.prime(torch.tensor(self.codes[-keep:]))
            if self.verbose:
                print(f"   🔄 LM context rolled over, kept the last {keep} codes")
            return
        _, self.lm_state = self.lm.lm_forward(torch.tensor([self.codes[-1]]), self.lm_state)

    def _frame_codes(self, start: int, end: int) -> List[int]:
        r = self.model.cfg.downsample
        return [self.codes[f // r] for f in range(start, end)]

    def _decode_chunk(self, width: int, available: int, pseudo: bool, timing: ChunkTiming) -> np.ndarray:
        a = self.decoded_frames
        shift = self.frontend_cfg.frame_shift
        r = self.model.cfg.downsample
        frame_codes = self._frame_codes(a, a + width)

        pseudo_frames = 0
        if self.lm is not None and pseudo:
            # remaining frames of codes pooled by this encoder chunk, then the LM continuation
            frame_codes += self._frame_codes(a + width, available)
            lm_started = time.perf_counter()
            context = self.lm.generate_pseudo_context(torch.tensor(self.codes), self.cfg.pseudo_frames,
                                                      self.sampling, self.lm_state, self._generator)
            timing.lm_ms += 1000 * (time.perf_counter() - lm_started)
            pseudo_codes = context.codes.repeat_interleave(r).tolist()
            pseudo_frames = len(pseudo_codes)
            frame_codes += pseudo_codes

        started = time.perf_counter()
        rows = self.model.decoder_rows(torch.tensor(frame_codes), self.speaker)
        out, self.decoder_caches = self.model.decoder.forward_streaming(
            rows, self.decoder_caches, lookahead=rows.size(0) - width)
        mel_rows = self.model.mel_out(out)
        self._converted.append(mel_rows[:width])
        self.decoded_frames += width
        timing.am_ms += 1000 * (time.perf_counter() - started)

        started = time.perf_counter()
        first = max(a - self.cfg.vocoder_context, 0)
        context_mel = torch.cat(self._converted).narrow(0, first, a + width - first)
        audio = self.vocoder(torch.cat([context_mel, mel_rows[width:]]).numpy())
        timing.vocoder_ms += 1000 * (time.perf_counter() - started)

        offset = first * shift
        segment = audio[a * shift - offset:(a + width) * shift - offset]
        region = None
        if pseudo_frames:
            region = (available * shift, self.frontend_cfg.num_samples(available + pseudo_frames))
        piece = self._emit(segment, a * shift, "real", region)
        self._tail = audio[(a + width) * shift - offset:]
        self._tail_pseudo = region
        return piece

    @torch.no_grad()
    def _closing_tail(self) -> np.ndarray:
        """Window overhang past the last frame shift, vocoded from real frames only"""
        shift = self.frontend_cfg.frame_shift
        end = self.decoded_frames
        first = max(end - self.cfg.vocoder_context - 1, 0)
        audio = self.vocoder(torch.cat(self._converted).narrow(0, first, end - first).numpy())
        return self._emit(audio[(end - first) * shift:], end * shift, "tail", None)

    def _emit(self, segment: np.ndarray, start: int, kind: str,
              region: Optional[Tuple[int, int]]) -> np.ndarray:
        """Cross-fade the head of a segment into the previous tail and log what was written.

        region is the sample range covered by pseudo frames in the vocoder call
        that produced the segment.
        """
        segment = segment.copy()
        faded = 0
        if self._tail is not None and self.crossfade_samples:
            faded = min(self.crossfade_samples, segment.size, self._tail.size)
            ramp = (np.arange(faded) + 1.0) / (faded + 1.0)
            segment[:faded] = (1.0 - ramp) * self._tail[:faded] + ramp * segment[:faded]
            covered = _overlap(start, start + faded, self._tail_pseudo) + _overlap(start, start + faded, region)
            self.emissions.append(Emission(start, start + faded, "crossfade", min(covered, faded)))
        end = start + segment.size
        if segment.size > faded:
            self.emissions.append(Emission(start + faded, end, kind, _overlap(start + faded, end, region)))
        self.emitted_samples += segment.size
        return segment


def _overlap(start: int, end: int, region: Optional[Tuple[int, int]]) -> int:
    if region is None:
        return 0
    return max(0, min(end, region[1]) - max(start, region[0]))

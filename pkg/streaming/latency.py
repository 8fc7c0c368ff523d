"""
Latency and real-time factor accounting

total = inference + chunk wait + lookahead, where inference is the mean
per-chunk compute of the acoustic model, the LM (full mode) and the vocoder.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from models.acoustic import AcousticConfig, AcousticModel
from models.context_lm import ContextLM, LmConfig
from streaming.frontend import to_float
from streaming.session import StreamSession

STAGES = ("am", "lm", "vocoder")


@dataclass
class LatencyReport:
    mode: str
    inference_ms: float
    chunk_wait_ms: float
    lookahead_ms: float
    total_ms: float
    rtf: float
    params_m: float
    stages: Dict[str, float] = field(default_factory=dict)
    chunks: int = 0

    @classmethod
    def build(cls, mode: str, stage_ms: Dict[str, float], chunk_ms: float, lookahead_ms: float,
              params: int, chunks: int = 0) -> "LatencyReport":
        inference = sum(stage_ms.get(stage, 0.0) for stage in STAGES)
        return cls(
            mode=mode,
            inference_ms=inference,
            chunk_wait_ms=float(chunk_ms),
            lookahead_ms=float(lookahead_ms),
            total_ms=inference + chunk_ms + lookahead_ms,
            rtf=inference / chunk_ms,
            params_m=params / 1e6,
            stages={stage: stage_ms.get(stage, 0.0) for stage in STAGES},
            chunks=chunks,
        )

    def identity_holds(self) -> bool:
        return self.total_ms == self.inference_ms + self.chunk_wait_ms + self.lookahead_ms

    def to_text(self) -> str:
        lines = [
            f"mode={self.mode}",
            f"inference_ms={self.inference_ms:.4f}",
            f"chunk_wait_ms={self.chunk_wait_ms:g}",
            f"lookahead_ms={self.lookahead_ms:g}",
            f"total_ms={self.total_ms:.4f}",
            f"rtf={self.rtf:.4f}",
            f"params_m={self.params_m:.3f}",
            f"chunks={self.chunks}",
        ]
        for stage, ms in self.stages.items():
            lines.append(f"{stage}_ms={ms:.4f}")
            lines.append(f"{stage}_rtf={ms / self.chunk_wait_ms:.4f}")
        lines.append(f"latency_ms={self.inference_ms:.2f}+{self.chunk_wait_ms:g}+{self.lookahead_ms:g}"
                     f"={self.total_ms:.2f}")
        return "\n".join(lines)


def parse_report(text: str) -> Dict[str, str]:
    """key=value lines back into a dict (values stay strings)"""
    pairs = (line.split("=", 1) for line in text.splitlines() if "=" in line)
    return {key.strip(): value.strip() for key, value in pairs}


def count_parameters(model: AcousticModel, lm: Optional[ContextLM] = None) -> int:
    """Inference parameters: acoustic model without HPC heads, plus the LM in full mode"""
    total = model.inference_parameters()
    if lm is not None:
        total += sum(p.numel() for p in lm.parameters())
    return total


def preset_parameter_counts(preset: str, num_speakers: int = 8) -> Dict[str, int]:
    """Parameter counts of freshly built preset models, no checkpoint needed"""
    am_cfg = AcousticConfig.preset(preset, num_speakers=num_speakers)
    model = AcousticModel(am_cfg)
    lm = ContextLM(LmConfig.preset(preset, am_cfg.vocab))
    return {"standalone": count_parameters(model), "full": count_parameters(model, lm)}


def session_lookahead_ms(session: StreamSession) -> float:
    """Window overhang and the cross-fade tail overlap, so the larger one counts"""
    return float(max(session.frontend_cfg.lookahead_ms, session.cfg.crossfade_ms))


def measure_latency(session: StreamSession, pcm: np.ndarray) -> LatencyReport:
    """Stream pcm through a fresh session in chunk-sized pieces and time every chunk.

    The first timed chunk is excluded as warm-up when more than one exists.
    """
    samples = to_float(pcm)
    piece = session.cfg.chunk_frames * session.frontend_cfg.frame_shift
    for start in range(0, samples.size, piece):
        session.push(samples[start:start + piece])
    session.flush()

    timings = session.timings[1:] if len(session.timings) > 1 else session.timings
    stage_ms = {
        "am": float(np.mean([t.am_ms for t in timings])) if timings else 0.0,
        "lm": float(np.mean([t.lm_ms for t in timings])) if timings else 0.0,
        "vocoder": float(np.mean([t.vocoder_ms for t in timings])) if timings else 0.0,
    }
    with torch.no_grad():
        params = count_parameters(session.model, session.lm)
    return LatencyReport.build(session.cfg.mode, stage_ms, session.chunk_ms,
                               session_lookahead_ms(session), params, chunks=len(timings))

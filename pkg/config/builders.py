"""
Typed configuration objects built from a Settings instance
"""

from core.errors import ConfigError
from data.corpus import CorpusSpec
from models.acoustic import AcousticConfig, LossWeights
from models.context_lm import LmConfig, SamplingConfig
from streaming.frontend import FrontendConfig
from streaming.session import StreamConfig


def acoustic_config(settings, num_speakers: int = None) -> AcousticConfig:
    return AcousticConfig.preset(
        settings.get("model.preset"),
        num_speakers=num_speakers or settings.get("model.speakers"),
        vocab=settings.get("model.vocab") or None,
        max_history=settings.get("model.max_history"),
    )


def lm_config(settings, num_codes: int) -> LmConfig:
    return LmConfig.preset(settings.get("model.preset"), num_codes, max_context=settings.get("lm.max_context"))


def loss_weights(settings) -> LossWeights:
    return LossWeights(settings.get("loss.alpha"), settings.get("loss.beta"), settings.get("loss.gamma"))


def frontend_config(am_cfg: AcousticConfig) -> FrontendConfig:
    return FrontendConfig(mel_bins=am_cfg.mel_bins)


def stream_config(settings, mode: str = None, chunk_ms: int = None) -> StreamConfig:
    chunk_ms = chunk_ms or settings.get("stream.chunk_ms")
    if chunk_ms % FrontendConfig.frame_shift_ms:
        raise ConfigError(f"chunk of {chunk_ms} ms is not a whole number of frames")
    return StreamConfig(
        mode=mode or settings.get("stream.mode"),
        chunk_frames=chunk_ms // FrontendConfig.frame_shift_ms,
        pseudo_frames=settings.get("stream.pseudo_frames"),
        crossfade_ms=settings.get("stream.crossfade_ms"),
    )


def sampling_config(settings) -> SamplingConfig:
    return SamplingConfig(
        mode=settings.get("sampling.mode"),
        k=settings.get("sampling.k"),
        temperature=settings.get("sampling.temperature"),
        seed=settings.get("sampling.seed"),
    )


def corpus_spec(settings, mel_bins: int) -> CorpusSpec:
    return CorpusSpec(
        num_speakers=settings.get("corpus.speakers"),
        utterances_per_speaker=settings.get("corpus.utterances"),
        token_vocab=settings.get("corpus.vocab"),
        mel_bins=mel_bins,
        min_tokens=settings.get("corpus.min_tokens"),
        max_tokens=settings.get("corpus.max_tokens"),
        seed=settings.get("corpus.seed"),
    )

#!/usr/bin/env python3
"""
Tests for the streaming engine: frontend, vocoder, wire codec, sessions and latency accounting
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from core.errors import ConfigError, FormatError, SessionClosedError, ShapeError, VocabularyError
from data.corpus import CorpusSpec, generate_corpus
from models.acoustic import AcousticConfig, AcousticModel
from models.context_lm import ContextLM, LmConfig, SamplingConfig
from streaming.frontend import FrontendConfig, MelFrontend, mel_centres, mel_frontend, to_float
from streaming.latency import (LatencyReport, count_parameters, measure_latency, parse_report,
                               preset_parameter_counts)
from streaming.session import StreamConfig, StreamSession
from streaming.vocoder import MelVocoder
from streaming.wire import (WIRE_MAGIC, TokenWire, bitrate_bps, compression_ratio, wire_decode, wire_encode)

TINY_FRONTEND = FrontendConfig(mel_bins=8)


def tiny_model(max_history: int = 64, seed: int = 0) -> AcousticModel:
    torch.manual_seed(seed)
    return AcousticModel(AcousticConfig.preset("tiny", num_speakers=3, max_history=max_history)).eval()


def tiny_lm(max_context: int = 256, seed: int = 0) -> ContextLM:
    torch.manual_seed(seed)
    lm = ContextLM(LmConfig.preset("tiny", num_codes=6, max_context=max_context))
    with torch.no_grad():
        lm.head.weight.normal_(0.0, 0.1)
    return lm.eval()


def sine(freq: float, seconds: float, amplitude: float = 0.5, rate: int = 16000) -> np.ndarray:
    t = np.arange(int(seconds * rate)) / rate
    return amplitude * np.sin(2 * math.pi * freq * t)


def run_session(session: StreamSession, mel: np.ndarray, piece: int = 3) -> np.ndarray:
    outputs = []
    for start in range(0, mel.shape[0], piece):
        out = session.push_mel(mel[start:start + piece])
        if out is not None:
            outputs.append(out)
    tail = session.flush()
    if tail is not None:
        outputs.append(tail)
    return np.concatenate(outputs)


# --- frontend -------------------------------------------------------------

def test_frontend_framing_constants():
    cfg = FrontendConfig()
    assert (cfg.frame_length, cfg.frame_shift, cfg.lookahead_ms) == (640, 160, 20)
    assert cfg.num_frames(16000) == 97
    assert cfg.num_frames(639) == 0
    assert cfg.num_samples(97) == 16000
    assert cfg.num_samples(0) == 0


def test_frontend_sine_peaks_at_its_band():
    mel = mel_frontend(sine(1000.0, 0.5))
    centres = mel_centres(FrontendConfig())
    peak_bands = mel.argmax(axis=1)
    spacing = np.diff(centres).max()
    assert np.all(np.abs(centres[peak_bands] - 1000.0) <= spacing)


def test_frontend_silence_sits_at_the_floor():
    cfg = FrontendConfig()
    mel = mel_frontend(np.zeros(3200), cfg)
    assert mel.shape == (cfg.num_frames(3200), 80)
    assert np.allclose(mel, np.log(cfg.log_floor))


def test_frontend_incremental_equals_offline():
    pcm = np.random.default_rng(0).normal(scale=0.1, size=5000)
    offline = mel_frontend(pcm)
    frontend = MelFrontend()
    online = np.concatenate([frontend.push(pcm[i:i + 97]) for i in range(0, pcm.size, 97)])
    assert np.array_equal(online, offline)
    assert frontend.frames_emitted == offline.shape[0]


def test_int16_input_is_scaled():
    assert np.allclose(to_float(np.array([16384, -32768], dtype=np.int16)), [0.5, -1.0])


# --- vocoder --------------------------------------------------------------

def test_vocoder_output_length():
    vocoder = MelVocoder()
    for frames in (1, 2, 10):
        assert vocoder(np.full((frames, 80), -3.0)).size == FrontendConfig().num_samples(frames)
    assert vocoder(np.zeros((0, 80))).size == 0
    with pytest.raises(ShapeError):
        vocoder(np.zeros((4, 40)))


def test_vocoder_silence_stays_silent():
    cfg = FrontendConfig()
    audio = MelVocoder(cfg)(np.full((12, 80), np.log(cfg.log_floor)))
    assert np.abs(audio).max() < 1e-6


def test_vocoder_round_trip_keeps_the_spectral_shape():
    noise = np.random.default_rng(0).normal(scale=0.01, size=6400)
    pcm = sine(440.0, 0.4) + sine(1800.0, 0.4, amplitude=0.2) + noise
    mel = mel_frontend(pcm)
    again = mel_frontend(MelVocoder()(mel))
    assert again.shape == mel.shape
    correlations = [np.corrcoef(a, b)[0, 1] for a, b in zip(mel, again)]
    assert np.mean(correlations) >= 0.8


def test_vocoder_round_trip_on_corpus_utterances():
    corpus = generate_corpus(CorpusSpec(num_speakers=2, utterances_per_speaker=2))
    vocoder = MelVocoder()
    correlations = []
    for utt in corpus:
        again = mel_frontend(vocoder(utt.mel))
        assert again.shape == utt.mel.shape
        correlations.extend(np.corrcoef(a, b)[0, 1] for a, b in zip(utt.mel, again))
    assert np.median(correlations) >= 0.95


def test_vocoder_is_deterministic():
    mel = generate_corpus(CorpusSpec(num_speakers=1, utterances_per_speaker=1))[0].mel
    assert np.array_equal(MelVocoder()(mel), MelVocoder()(mel))


# --- wire codec -----------------------------------------------------------

def test_wire_round_trip_and_rates():
    rng = np.random.default_rng(0)
    for _ in range(200):
        codes = rng.integers(1, 151, size=int(rng.integers(0, 80)))
        assert np.array_equal(wire_decode(wire_encode(codes, 150)), codes)
    assert bitrate_bps(50) == 400
    assert compression_ratio(50) == 640


def test_wire_layout():
    blob = wire_encode(np.array([1, 150]), 150, rate_hz=50)
    assert blob[:8] == WIRE_MAGIC
    assert blob[8:] == bytes([1, 150, 0, 50, 0, 0, 149])
    wire = TokenWire.from_bytes(blob)
    assert (wire.vocab, wire.token_rate_hz, wire.payload) == (150, 50, bytes([0, 149]))


def test_wire_errors():
    blob = wire_encode(np.array([3, 4]), 16)
    with pytest.raises(FormatError):
        wire_decode(b"X" + blob[1:])
    with pytest.raises(FormatError):
        wire_decode(blob[:10])
    with pytest.raises(FormatError):
        wire_decode(blob[:8] + bytes([2]) + blob[9:])
    with pytest.raises(FormatError):
        wire_decode(blob[:-1] + bytes([200]))
    with pytest.raises(VocabularyError):
        wire_encode(np.array([0]), 16)
    with pytest.raises(VocabularyError):
        wire_encode(np.array([17]), 16)
    with pytest.raises(VocabularyError):
        wire_encode(np.array([1]), 300)


# --- sessions -------------------------------------------------------------

@pytest.mark.parametrize("chunk", [1, 2, 4])
def test_standalone_streaming_matches_offline_conversion(chunk):
    model = tiny_model(max_history=8)
    corpus = generate_corpus(CorpusSpec(num_speakers=3, utterances_per_speaker=7, token_vocab=6, mel_bins=8,
                                        min_tokens=8, max_tokens=16))
    assert len(corpus) >= 20
    for utt in corpus:
        session = StreamSession(model, utt.speaker_id, StreamConfig(chunk_frames=chunk), frontend=TINY_FRONTEND)
        run_session(session, utt.mel)
        with torch.no_grad():
            offline = model.convert(torch.as_tensor(utt.mel), utt.speaker_id, chunk).numpy()
        assert session.converted_mel.shape == offline.shape
        assert np.abs(session.converted_mel - offline).max() <= 1e-4


def test_session_output_is_conserved_and_tiled():
    model = tiny_model()
    mel = np.random.default_rng(0).normal(size=(21, 8)).astype(np.float32)
    session = StreamSession(model, 0, StreamConfig(chunk_frames=2), frontend=TINY_FRONTEND)
    audio = run_session(session, mel)
    assert audio.size == TINY_FRONTEND.num_samples(21)
    assert session.emitted_samples == audio.size
    position = 0
    for emission in session.emissions:
        assert emission.start == position
        position = emission.end
    assert position == audio.size
    assert session.emissions[-1].kind == "tail"


def test_audio_in_audio_out_keeps_the_duration():
    model = tiny_model()
    pcm = sine(300.0, 0.3)
    session = StreamSession(model, 2, StreamConfig(chunk_frames=2), frontend=TINY_FRONTEND)
    outputs = [session.push(pcm[i:i + 320]) for i in range(0, pcm.size, 320)]
    outputs.append(session.flush())
    audio = np.concatenate([o for o in outputs if o is not None])
    assert abs(audio.size - pcm.size) <= 160
    assert np.isfinite(audio).all()


def test_full_mode_never_emits_pseudo_frames_as_real_audio():
    model = tiny_model()
    mel = np.random.default_rng(1).normal(size=(24, 8)).astype(np.float32)
    session = StreamSession(model, 1, StreamConfig(mode="full", chunk_frames=2, pseudo_frames=2),
                            lm=tiny_lm(), frontend=TINY_FRONTEND)
    audio = run_session(session, mel)
    assert audio.size == TINY_FRONTEND.num_samples(24)
    assert session.converted_mel.shape == (24, 8)
    assert all(e.pseudo_samples == 0 for e in session.emissions if e.kind in ("real", "tail"))
    assert any(e.pseudo_samples > 0 for e in session.emissions if e.kind == "crossfade")
    assert all(t.lm_ms > 0 for t in session.timings[:-1])


@pytest.mark.parametrize("chunk", [1, 2, 4])
def test_full_mode_output_does_not_depend_on_push_sizes(chunk):
    model, lm = tiny_model(), tiny_lm()
    mel = np.random.default_rng(4).normal(size=(23, 8)).astype(np.float32)
    cfg = StreamConfig(mode="full", chunk_frames=chunk)
    outputs = {}
    for piece in (mel.shape[0], 2):
        session = StreamSession(model, 1, cfg, lm=lm, sampling=SamplingConfig(k=3, seed=5), frontend=TINY_FRONTEND)
        audio = run_session(session, mel, piece=piece)
        outputs[piece] = (session.converted_mel, audio)
    whole, small = outputs[mel.shape[0]], outputs[2]
    assert np.array_equal(whole[0], small[0])
    assert np.array_equal(whole[1], small[1])


def test_one_timing_per_decoded_chunk():
    model = tiny_model()
    for mode in ("standalone", "full"):
        session = StreamSession(model, 0, StreamConfig(mode=mode, chunk_frames=1),
                                lm=tiny_lm() if mode == "full" else None, frontend=TINY_FRONTEND)
        pcm = sine(250.0, 1.0)
        for start in range(0, pcm.size, 160):
            session.push(pcm[start:start + 160])
        session.flush()
        assert session.decoded_frames == TINY_FRONTEND.num_frames(pcm.size)
        assert len(session.timings) == session.decoded_frames
        assert all(t.am_ms > 0 and t.vocoder_ms > 0 for t in session.timings)


def test_full_mode_rolls_the_lm_window():
    model = tiny_model()
    lm = tiny_lm(max_context=8)
    mel = np.random.default_rng(2).normal(size=(40, 8)).astype(np.float32)
    session = StreamSession(model, 0, StreamConfig(mode="full"), lm=lm,
                            sampling=SamplingConfig(mode="greedy"), frontend=TINY_FRONTEND)
    run_session(session, mel)
    assert len(session.codes) == 20
    assert session.lm_state.position <= lm.cfg.max_context


def test_greedy_full_mode_is_deterministic():
    model, lm = tiny_model(), tiny_lm()
    mel = np.random.default_rng(3).normal(size=(18, 8)).astype(np.float32)
    runs = []
    for _ in range(2):
        session = StreamSession(model, 1, StreamConfig(mode="full"), lm=lm,
                                sampling=SamplingConfig(mode="greedy"), frontend=TINY_FRONTEND)
        runs.append(run_session(session, mel))
    assert np.array_equal(runs[0], runs[1])


def test_session_errors():
    model = tiny_model()
    with pytest.raises(ConfigError):
        StreamSession(model, 0, StreamConfig(mode="full"), frontend=TINY_FRONTEND)
    with pytest.raises(ShapeError):
        StreamSession(model, 0, StreamConfig())
    with pytest.raises(ConfigError):
        StreamConfig(mode="turbo")
    with pytest.raises(ConfigError):
        StreamConfig(chunk_frames=0)
    with pytest.raises(VocabularyError):
        StreamSession(model, 5, StreamConfig(), frontend=TINY_FRONTEND)

    session = StreamSession(model, 0, StreamConfig(), frontend=TINY_FRONTEND)
    session.push_mel(np.zeros((4, 8), dtype=np.float32))
    session.flush()
    with pytest.raises(SessionClosedError):
        session.push_mel(np.zeros((2, 8), dtype=np.float32))
    with pytest.raises(SessionClosedError):
        session.flush()


# --- latency --------------------------------------------------------------

def test_latency_identity_and_text_form():
    report = LatencyReport.build("full", {"am": 2.5, "lm": 10.0, "vocoder": 3.44}, 20, 20, 22_700_000, chunks=7)
    assert report.identity_holds()
    assert report.total_ms == report.inference_ms + 40
    assert report.rtf == pytest.approx(15.94 / 20)
    fields = parse_report(report.to_text())
    assert fields["mode"] == "full"
    assert fields["latency_ms"] == "15.94+20+20=55.94"
    assert float(fields["params_m"]) == pytest.approx(22.7)
    assert "lm_rtf" in fields


def test_measure_latency_on_a_session():
    model = tiny_model()
    reports = {}
    for mode in ("standalone", "full"):
        session = StreamSession(model, 0, StreamConfig(mode=mode), lm=tiny_lm() if mode == "full" else None,
                                frontend=TINY_FRONTEND)
        reports[mode] = measure_latency(session, sine(200.0, 0.3))
    for report in reports.values():
        assert report.identity_holds()
        assert (report.chunk_wait_ms, report.lookahead_ms) == (20.0, 20.0)
        assert report.chunks > 0
    assert reports["standalone"].stages["lm"] == 0.0
    assert reports["full"].params_m > reports["standalone"].params_m


def test_standalone_mode_is_faster_than_full_mode():
    model = tiny_model()
    pcm = sine(200.0, 2.0)
    standalone = measure_latency(StreamSession(model, 0, StreamConfig(), frontend=TINY_FRONTEND), pcm)
    full = measure_latency(StreamSession(model, 0, StreamConfig(mode="full"), lm=tiny_lm(), frontend=TINY_FRONTEND),
                           pcm)
    assert standalone.rtf < full.rtf


def test_parameter_counts():
    model = tiny_model()
    assert count_parameters(model) == model.inference_parameters()
    assert count_parameters(model, tiny_lm()) > count_parameters(model)

    large = preset_parameter_counts("large")
    assert abs(large["standalone"] / 12.1e6 - 1) <= 0.15
    assert abs(large["full"] / 22.7e6 - 1) <= 0.15
    assert large["standalone"] < large["full"]

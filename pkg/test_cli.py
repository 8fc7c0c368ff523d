#!/usr/bin/env python3
"""
Tests for run configuration and the command-line surface
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import soundfile as sf

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from config.builders import acoustic_config, stream_config
from config.settings import Settings
from core.errors import ConfigError
from main import (AM_CHECKPOINT, AM_LOG, CODES_FILE, EXIT_MISSING_INPUT, EXIT_MISSING_MODEL, EXIT_OK,
                  EXIT_USAGE, EXIT_VERIFY_FAILED, LM_CHECKPOINT, main)


def write_config(tmp_path: Path) -> Path:
    """Tiny-preset configuration with every path inside tmp_path"""
    values = {
        "model.preset": "tiny",
        "model.vocab": 6,
        "corpus.vocab": 6,
        "corpus.speakers": 2,
        "corpus.utterances": 3,
        "corpus.min_tokens": 5,
        "corpus.max_tokens": 8,
        "train.steps": 2,
        "train.batch_size": 2,
        "lm.steps": 3,
        "lm.batch_size": 2,
        "paths.corpus": tmp_path / "corpus",
        "paths.checkpoints": tmp_path / "checkpoints",
        "paths.outputs": tmp_path / "outputs",
    }
    path = tmp_path / "run.conf"
    path.write_text("".join(f"{key}={value}\n" for key, value in values.items()), encoding="utf-8")
    return path


def write_tone(path: Path, seconds: float = 0.5, rate: int = 16000) -> Path:
    t = np.arange(int(seconds * rate)) / rate
    sf.write(str(path), 0.3 * np.sin(2 * np.pi * 220.0 * t), rate, subtype="PCM_16")
    return path


def test_settings_create_defaults_and_reload(tmp_path):
    path = tmp_path / "run.conf"
    settings = Settings(str(path), use_env=False)
    assert path.exists()
    assert settings.get("loss.alpha") == 45.0
    assert settings.get("stream.chunk_ms") == 20
    assert Settings(str(path), use_env=False).as_dict() == settings.as_dict()


def test_settings_coerce_and_reject(tmp_path):
    settings = Settings(str(write_config(tmp_path)), use_env=False)
    assert settings.get("model.vocab") == 6
    assert settings.path("corpus") == tmp_path / "corpus"
    settings.apply_overrides(["train.lr=0.01"])
    assert settings.get("train.lr") == 0.01
    with pytest.raises(ConfigError):
        settings.set("train.colour", "blue")
    with pytest.raises(ConfigError):
        settings.set("train.steps", "many")
    with pytest.raises(ConfigError):
        settings.apply_overrides(["stream.mode=turbo"])
    with pytest.raises(ConfigError):
        settings.apply_overrides(["no-equals-sign"])


def test_environment_overrides_the_file(tmp_path, monkeypatch):
    monkeypatch.setenv("DVC3_TRAIN__STEPS", "7")
    settings = Settings(str(write_config(tmp_path)))
    assert settings.get("train.steps") == 7


def test_builders(tmp_path):
    settings = Settings(str(write_config(tmp_path)), use_env=False)
    assert stream_config(settings, chunk_ms=40).chunk_frames == 4
    assert stream_config(settings).chunk_frames == 2
    with pytest.raises(ConfigError):
        stream_config(settings, chunk_ms=25)
    cfg = acoustic_config(settings, num_speakers=2)
    assert (cfg.mel_bins, cfg.vocab, cfg.num_speakers) == (8, 6, 2)


def test_model_vocab_follows_the_preset_unless_set(tmp_path):
    settings = Settings(str(tmp_path / "run.conf"), use_env=False)
    assert settings.get("model.vocab") == 0
    assert acoustic_config(settings).vocab == 16
    settings.apply_overrides(["model.preset=paper"])
    assert settings.get("model.preset") == "large"
    assert acoustic_config(settings).vocab == 150
    settings.apply_overrides(["model.vocab=32"])
    assert acoustic_config(settings).vocab == 32
    with pytest.raises(ConfigError):
        settings.apply_overrides(["model.vocab=1"])


def test_usage_errors_exit_2(tmp_path):
    config = str(write_config(tmp_path))
    assert main(["--config", config, "gen-data", "--speakers", "0"]) == EXIT_USAGE
    assert main(["--config", config, "--set", "model.colour=red", "gen-data"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["--config", config, "convert", "in.wav", "out.wav"])


def test_missing_inputs_exit_3(tmp_path):
    config = str(write_config(tmp_path))
    assert main(["--config", config, "train-am"]) == EXIT_MISSING_INPUT
    assert main(["--config", config, "convert", str(tmp_path / "nope.wav"), str(tmp_path / "out.wav"),
                 "--target-speaker", "0"]) == EXIT_MISSING_INPUT


def test_missing_model_exit_4(tmp_path):
    config = str(write_config(tmp_path))
    tone = write_tone(tmp_path / "in.wav")
    assert main(["--config", config, "convert", str(tone), str(tmp_path / "out.wav"),
                 "--target-speaker", "0"]) == EXIT_MISSING_MODEL
    assert main(["--config", config, "bench"]) == EXIT_MISSING_MODEL


def test_bench_presets_needs_no_model(tmp_path, capsys):
    assert main(["--config", str(write_config(tmp_path)), "bench", "--presets"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "large: standalone=" in out


def test_pipeline_from_corpus_to_conversion(tmp_path):
    config = str(write_config(tmp_path))
    checkpoints = tmp_path / "checkpoints"
    tone = write_tone(tmp_path / "in.wav")
    resampled = write_tone(tmp_path / "in_8k.wav", rate=8000)

    assert main(["--config", config, "gen-data"]) == EXIT_OK
    assert (tmp_path / "corpus" / "meta.txt").exists()

    latents = tmp_path / "latents.tsv"
    assert main(["--config", config, "train-am", "--dump-latents", str(latents)]) == EXIT_OK
    assert (checkpoints / AM_CHECKPOINT).exists()
    assert len((checkpoints / AM_LOG).read_text().splitlines()) == 3
    header = latents.read_text().splitlines()[0].split("\t")
    assert header == ["speaker"] + [f"z{i}" for i in range(6)]

    assert main(["--config", config, "train-am", "--resume", "--steps", "3"]) == EXIT_OK
    assert len((checkpoints / AM_LOG).read_text().splitlines()) == 4

    out = tmp_path / "standalone.wav"
    assert main(["--config", config, "convert", str(tone), str(out), "--target-speaker", "1"]) == EXIT_OK
    audio, rate = sf.read(str(out))
    assert rate == 16000 and abs(audio.size - 8000) <= 160

    assert main(["--config", config, "convert", str(tone), str(tmp_path / "full.wav"),
                 "--target-speaker", "1", "--mode", "full"]) == EXIT_MISSING_MODEL

    assert main(["--config", config, "train-lm"]) == EXIT_OK
    assert (checkpoints / LM_CHECKPOINT).exists()
    assert (checkpoints / CODES_FILE).exists()

    assert main(["--config", config, "convert", str(resampled), str(tmp_path / "full.wav"),
                 "--target-speaker", "0", "--mode", "full", "--chunk-ms", "40"]) == EXIT_OK
    assert sf.info(str(tmp_path / "full.wav")).frames > 0

    assert main(["--config", config, "convert", str(tone), str(tmp_path / "offline.wav"),
                 "--target-speaker", "0", "--offline"]) == EXIT_OK
    assert abs(sf.info(str(tmp_path / "offline.wav")).frames - 8000) <= 160

    assert main(["--config", config, "convert", str(tone), str(tmp_path / "bad.wav"),
                 "--target-speaker", "0", "--chunk-ms", "25"]) == EXIT_USAGE

    assert main(["--config", config, "bench", "--input", str(tone)]) == EXIT_OK
    assert list((tmp_path / "outputs").glob("latency_*.md"))


@pytest.mark.slow
def test_verify_passes_then_flags_a_corrupt_checkpoint(tmp_path, capsys):
    config = str(write_config(tmp_path))
    assert main(["--config", config, "verify"]) == EXIT_OK
    reports = list((tmp_path / "outputs").glob("verify_*.md"))
    assert len(reports) == 1

    checkpoints = tmp_path / "checkpoints"
    checkpoints.mkdir()
    (checkpoints / "broken.ckpt").write_bytes(b"definitely not a checkpoint")
    assert main(["--config", config, "verify"]) == EXIT_VERIFY_FAILED
    # once in the running log, once in the failure summary
    lines = capsys.readouterr().out.splitlines()
    flagged = [line for line in lines if line.startswith("   ❌ checkpoint:broken.ckpt")]
    assert len(flagged) == 2

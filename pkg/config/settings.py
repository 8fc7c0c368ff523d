"""
Run configuration for the DualVC toolkit

Plain key=value files with dotted keys (loss.alpha=45). Every key has a
default below; unknown keys are rejected. DVC3_<SECTION>__<KEY> environment
variables (also read from a .env file) override file values.
"""

import copy
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv

from core.errors import ConfigError

ENV_PREFIX = "DVC3_"
PRESETS = ("tiny", "toy", "large")
PRESET_ALIASES = {"paper": "large"}


class Settings:
    """Configuration settings manager"""

    DEFAULT_CONFIG = {
        "model": {
            "preset": "toy",
            "vocab": 0,
            "speakers": 8,
            "max_history": 64,
        },
        "loss": {
            "alpha": 45.0,
            "beta": 1.0,
            "gamma": 10.0,
        },
        "gumbel": {
            "start_temperature": 2.0,
            "end_temperature": 0.5,
        },
        "train": {
            "steps": 500,
            "batch_size": 4,
            "lr": 1e-3,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "seed": 0,
            "log_interval": 50,
            "checkpoint_interval": 100,
            "token_source": "ground_truth",
            "kmeans_iterations": 100,
        },
        "lm": {
            "steps": 400,
            "batch_size": 8,
            "lr": 1e-3,
            "seed": 0,
            "extract_chunk": 2,
            "heldout_fraction": 0.1,
            "max_context": 256,
        },
        "stream": {
            "mode": "standalone",
            "chunk_ms": 20,
            "pseudo_frames": 2,
            "crossfade_ms": 20,
        },
        "sampling": {
            "mode": "top_k",
            "k": 10,
            "temperature": 1.0,
            "seed": 0,
        },
        "corpus": {
            "speakers": 8,
            "utterances": 50,
            "vocab": 16,
            "min_tokens": 20,
            "max_tokens": 40,
            "seed": 0,
        },
        "paths": {
            "corpus": "corpus",
            "checkpoints": "checkpoints",
            "outputs": "outputs",
        },
    }

    CHOICES = {
        "model.preset": PRESETS,
        "train.token_source": ("ground_truth", "kmeans"),
        "stream.mode": ("full", "standalone"),
        "sampling.mode": ("greedy", "top_k"),
    }

    def __init__(self, config_path: Optional[str] = "config/run.conf", use_env: bool = True):
        """Load settings from file (created with defaults when missing), then apply env overrides"""
        self.config_path = Path(config_path) if config_path else None
        self.settings = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_path is not None:
            self._load_or_create_config()
        if use_env:
            self._apply_env()
        self.validate()

    @classmethod
    def keys(cls) -> Iterable[str]:
        for section, values in cls.DEFAULT_CONFIG.items():
            for key in values:
                yield f"{section}.{key}"

    def _load_or_create_config(self) -> None:
        if not self.config_path.exists():
            self.save()
            print(f"Created default configuration at {self.config_path}")
            return
        for key, raw in dotenv_values(self.config_path).items():
            self.set(key, raw)

    def _apply_env(self) -> None:
        load_dotenv()
        for key in self.keys():
            section, name = key.split(".")
            raw = os.environ.get(f"{ENV_PREFIX}{section.upper()}__{name.upper()}")
            if raw is not None:
                self.set(key, raw)

    def _coerce(self, key_path: str, value: Any) -> Any:
        default = self._default(key_path)
        if value is None:
            raise ConfigError(f"'{key_path}' has no value")
        try:
            if isinstance(default, float):
                return float(value)
            if isinstance(default, int):
                return int(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"'{key_path}' expects a {type(default).__name__}, got '{value}'") from e
        return str(value)

    def _default(self, key_path: str) -> Any:
        parts = key_path.split(".")
        if len(parts) != 2 or parts[0] not in self.DEFAULT_CONFIG or parts[1] not in self.DEFAULT_CONFIG[parts[0]]:
            raise ConfigError(f"unknown configuration key '{key_path}'")
        return self.DEFAULT_CONFIG[parts[0]][parts[1]]

    def get(self, key_path: str, default=None):
        """Get configuration value using dot notation (e.g., 'loss.alpha')"""
        section, _, key = key_path.partition(".")
        return self.settings.get(section, {}).get(key, default)

    def set(self, key_path: str, value: Any) -> None:
        """Set a known key, coercing the value to the type of its default"""
        section, key = key_path.split(".", 1) if "." in key_path else (key_path, "")
        coerced = self._coerce(key_path, value)
        if key_path == "model.preset":
            coerced = PRESET_ALIASES.get(coerced, coerced)
        self.settings[section][key] = coerced

    def apply_overrides(self, pairs: Iterable[str]) -> None:
        """Apply command-line key=value overrides"""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override '{pair}' is not key=value")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value.strip())
        self.validate()

    def validate(self) -> None:
        for key, allowed in self.CHOICES.items():
            if self.get(key) not in allowed:
                raise ConfigError(f"'{key}' must be one of {allowed}, got '{self.get(key)}'")
        positive = ("model.speakers", "model.max_history", "train.steps", "train.batch_size",
                    "lm.steps", "lm.batch_size", "lm.max_context", "corpus.speakers", "corpus.utterances",
                    "corpus.min_tokens", "stream.chunk_ms", "sampling.k")
        for key in positive:
            if self.get(key) <= 0:
                raise ConfigError(f"'{key}' must be positive, got {self.get(key)}")
        if self.get("stream.chunk_ms") % 10 != 0:
            raise ConfigError("stream.chunk_ms must be a multiple of the 10 ms frame shift")
        if self.get("corpus.vocab") < 2:
            raise ConfigError("corpus.vocab needs at least two tokens")
        # model.vocab=0 takes the preset default
        if self.get("model.vocab") < 0 or self.get("model.vocab") == 1:
            raise ConfigError("model.vocab must be 0 (preset default) or at least 2")
        if self.get("corpus.max_tokens") < self.get("corpus.min_tokens"):
            raise ConfigError("corpus.max_tokens must be >= corpus.min_tokens")
        if not 0.0 < self.get("lm.heldout_fraction") < 1.0:
            raise ConfigError("lm.heldout_fraction must lie strictly between 0 and 1")
        if min(self.get("loss.alpha"), self.get("loss.beta"), self.get("loss.gamma")) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.get("sampling.temperature") <= 0 or self.get("gumbel.end_temperature") <= 0:
            raise ConfigError("temperatures must be positive")

    def to_text(self) -> str:
        lines = ["# DualVC run configuration (key=value, dotted keys)"]
        for section, values in self.settings.items():
            lines.append(f"\n# {section}")
            lines.extend(f"{section}.{key}={value}" for key, value in values.items())
        return "\n".join(lines) + "\n"

    def save(self, path: Optional[Path] = None) -> Path:
        """Save configuration to file"""
        path = Path(path or self.config_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def as_dict(self) -> Dict[str, Any]:
        return {key: self.get(key) for key in self.keys()}

    def path(self, name: str) -> Path:
        return Path(self.get(f"paths.{name}"))

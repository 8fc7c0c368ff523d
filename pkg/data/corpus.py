"""
Synthetic speech-like corpus with ground-truth tokens and speaker identities

Tokens follow a sticky Markov chain; every token owns a smooth spectral
template and every speaker adds a fixed spectral tilt and gain. Templates
carry no tilt or gain of their own, so both the content and the speaker are
linearly recoverable from a single mel frame.
"""

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Union

import numpy as np
from dotenv import dotenv_values

from core.errors import FormatError, ShapeError

UTT_MAGIC = b"DVC3UTT"
META_FILE = "meta.txt"


@dataclass
class CorpusSpec:
    num_speakers: int = 8
    utterances_per_speaker: int = 50
    token_vocab: int = 16
    token_rate: int = 50
    mel_rate: int = 100
    mel_bins: int = 80
    min_tokens: int = 20
    max_tokens: int = 40
    self_transition: float = 0.6
    noise: float = 0.05
    speaker_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("a corpus needs at least one speaker and one utterance per speaker")
        if self.token_vocab < 2:
            raise ValueError(f"token_vocab must be >= 2, got {self.token_vocab}")
        if self.mel_rate % self.token_rate != 0:
            raise ValueError(f"mel_rate {self.mel_rate} is not a multiple of token_rate {self.token_rate}")
        if self.mel_bins < 2 or self.speaker_spread < 0:
            raise ValueError("a corpus needs at least two mel bins and a non-negative speaker spread")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError(f"bad token length range {self.min_tokens}..{self.max_tokens}")

    @property
    def downsample(self) -> int:
        return self.mel_rate // self.token_rate


@dataclass
class Utterance:
    mel: np.ndarray          # (T_m, F) float32 log-mel
    tokens: np.ndarray       # (T,) 1-based token ids
    speaker_id: int

    def __post_init__(self):
        if self.mel.ndim != 2 or self.tokens.ndim != 1:
            raise ShapeError("utterance needs a 2-D mel and a 1-D token sequence")

    @property
    def num_frames(self) -> int:
        return self.mel.shape[0]


def offset_basis(mel_bins: int) -> np.ndarray:
    """(2, F) orthonormal rows: a flat gain and a linear tilt"""
    flat = np.ones(mel_bins)
    ramp = np.linspace(-1.0, 1.0, mel_bins)
    return np.stack([flat / np.linalg.norm(flat), ramp / np.linalg.norm(ramp)])


def token_templates(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """(vocab, F) log-spectral templates built from three Gaussian bumps each"""
    bins = np.arange(spec.mel_bins)
    templates = np.zeros((spec.token_vocab, spec.mel_bins))
    for v in range(spec.token_vocab):
        for _ in range(3):
            centre = rng.uniform(0, spec.mel_bins)
            width = rng.uniform(0.03, 0.1) * spec.mel_bins
            height = rng.uniform(1.0, 3.0)
            templates[v] += height * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    # gain and tilt are left to the speakers
    basis = offset_basis(spec.mel_bins)
    templates -= (templates @ basis.T) @ basis
    return templates - 2.0


def speaker_offsets(spec: CorpusSpec) -> np.ndarray:
    """(speakers, F) tilt + gain per speaker, placed on an ellipse in (tilt, gain)"""
    ramp = np.linspace(-1.0, 1.0, spec.mel_bins)
    angles = 2 * np.pi * np.arange(spec.num_speakers) / spec.num_speakers
    tilt = spec.speaker_spread * np.cos(angles)
    gain = spec.speaker_spread * np.sin(angles)
    return tilt[:, None] * ramp[None, :] + gain[:, None]


def sample_tokens(spec: CorpusSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    """First-order Markov chain: stay with probability self_transition, else jump uniformly"""
    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = rng.integers(1, spec.token_vocab + 1)
    for t in range(1, length):
        if rng.random() < spec.self_transition:
            tokens[t] = tokens[t - 1]
        else:
            jump = rng.integers(1, spec.token_vocab)
            tokens[t] = jump + (jump >= tokens[t - 1])
    return tokens


def generate_corpus(spec: CorpusSpec) -> List[Utterance]:
    rng = np.random.default_rng(spec.seed)
    templates = token_templates(spec, rng)
    offsets = speaker_offsets(spec)
    r = spec.downsample

    corpus = []
    for speaker in range(spec.num_speakers):
        for _ in range(spec.utterances_per_speaker):
            length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            tokens = sample_tokens(spec, length, rng)
            mel = np.repeat(templates[tokens - 1], r, axis=0) + offsets[speaker]
            mel += rng.normal(0.0, spec.noise, size=mel.shape)
            corpus.append(Utterance(mel.astype(np.float32), tokens, speaker))
    return corpus


def encode_utterance(utt: Utterance) -> bytes:
    num_frames, bins = utt.mel.shape
    header = UTT_MAGIC + struct.pack("<IIIH", utt.speaker_id, utt.tokens.size, num_frames, bins)
    return header + utt.tokens.astype("<u2").tobytes() + utt.mel.astype("<f4").tobytes()


def decode_utterance(blob: bytes) -> Utterance:
    if blob[:len(UTT_MAGIC)] != UTT_MAGIC:
        raise FormatError("not a DVC3UTT utterance file")
    offset = len(UTT_MAGIC)
    try:
        speaker, length, num_frames, bins = struct.unpack_from("<IIIH", blob, offset)
    except struct.error as e:
        raise FormatError(f"truncated utterance header: {e}") from e
    offset += struct.calcsize("<IIIH")
    expected = offset + 2 * length + 4 * num_frames * bins
    if len(blob) != expected:
        raise FormatError(f"utterance file is {len(blob)} bytes, header implies {expected}")
    tokens = np.frombuffer(blob, dtype="<u2", count=length, offset=offset).astype(np.int64)
    offset += 2 * length
    mel = np.frombuffer(blob, dtype="<f4", count=num_frames * bins, offset=offset)
    return Utterance(mel.reshape(num_frames, bins).astype(np.float32), tokens, int(speaker))


def save_corpus(corpus: List[Utterance], spec: CorpusSpec, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = "".join(f"{key}={value}\n" for key, value in asdict(spec).items())
    (directory / META_FILE).write_text(meta, encoding="utf-8")
    for index, utt in enumerate(corpus):
        (directory / f"utt_{index:05d}.bin").write_bytes(encode_utterance(utt))
    return directory


def load_spec(directory: Union[str, Path]) -> CorpusSpec:
    meta_path = Path(directory) / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no corpus at {directory} ({META_FILE} missing)")
    values = dotenv_values(meta_path)
    types = {f.name: f.type for f in fields(CorpusSpec)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise FormatError(f"unknown corpus meta key '{key}'")
        kwargs[key] = float(raw) if types[key] in (float, "float") else int(raw)
    return CorpusSpec(**kwargs)


def load_corpus(directory: Union[str, Path]) -> List[Utterance]:
    directory = Path(directory)
    load_spec(directory)
    files = sorted(directory.glob("utt_*.bin"))
    if not files:
        raise FileNotFoundError(f"corpus at {directory} has no utterances")
    return [decode_utterance(path.read_bytes()) for path in files]

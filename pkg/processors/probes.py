"""
Linear probes and the content/speaker decoupling check
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from core.errors import EmptyCorpusError
from data.corpus import Utterance
from models.acoustic import AcousticModel
from models.context_lm import BOS, ContextLM, SamplingConfig
from streaming.frontend import FrontendConfig
from streaming.session import MODES, StreamConfig, StreamSession


@dataclass
class DecouplingResult:
    speaker_accuracy: float
    chance: float
    token_accuracy: float
    margin: float = 0.10
    min_token_accuracy: float = 0.90

    @property
    def passed(self) -> bool:
        return (self.speaker_accuracy <= self.chance + self.margin
                and self.token_accuracy >= self.min_token_accuracy)

    def summary(self) -> str:
        flag = "✅" if self.passed else "❌"
        return (f"{flag} codes->speaker probe {self.speaker_accuracy:.1%} (chance {self.chance:.1%}), "
                f"token accuracy {self.token_accuracy:.1%}")


def probe_accuracy(features: np.ndarray, labels: np.ndarray, seed: int = 0, test_size: float = 0.3) -> float:
    """Held-out accuracy of a multinomial logistic-regression probe"""
    labels = np.asarray(labels)
    stratify = labels if np.unique(labels).size > 1 and np.bincount(labels).min() >= 2 else None
    x_train, x_test, y_train, y_test = train_test_split(
        features, labels, test_size=test_size, random_state=seed, stratify=stratify)
    probe = LogisticRegression(max_iter=2000)
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


def frame_dataset(corpus: Sequence[Utterance], max_frames: int, seed: int = 0
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mel frames, frame-level tokens, speaker ids) for a random subset of frames"""
    mels, tokens, speakers = [], [], []
    for utt in corpus:
        r = utt.mel.shape[0] // utt.tokens.size
        mels.append(utt.mel)
        tokens.append(np.repeat(utt.tokens, r)[:utt.mel.shape[0]])
        speakers.append(np.full(utt.mel.shape[0], utt.speaker_id))
    mels, tokens, speakers = np.concatenate(mels), np.concatenate(tokens), np.concatenate(speakers)
    rng = np.random.default_rng(seed)
    picks = rng.choice(mels.shape[0], size=min(max_frames, mels.shape[0]), replace=False)
    return mels[picks], tokens[picks], speakers[picks]


def code_features(model: AcousticModel, corpus: Sequence[Utterance], chunk_size: int = 0
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-hot codes, ground-truth tokens and speaker ids per token position"""
    onehots, tokens, speakers = [], [], []
    model.eval()
    with torch.no_grad():
        for utt in corpus:
            latents = model.latents(torch.as_tensor(utt.mel), chunk_size)
            codes = latents.argmax(dim=-1).numpy()
            onehots.append(np.eye(model.cfg.vocab)[codes])
            tokens.append(utt.tokens)
            speakers.append(np.full(codes.size, utt.speaker_id))
    return np.concatenate(onehots), np.concatenate(tokens), np.concatenate(speakers)


def decoupling_check(model: AcousticModel, corpus: Sequence[Utterance], seed: int = 0) -> DecouplingResult:
    """Codes should predict tokens but not speakers"""
    onehot, tokens, speakers = code_features(model, corpus)
    token_accuracy = float(np.mean(onehot.argmax(axis=1) + 1 == tokens))
    chance = 1.0 / np.unique(speakers).size
    return DecouplingResult(probe_accuracy(onehot, speakers, seed), chance, token_accuracy)


def unigram_nll(train: Sequence[np.ndarray], test: Sequence[np.ndarray], vocab: int) -> float:
    """Per-token NLL of an add-one unigram model fit on train"""
    counts = np.bincount(np.concatenate(train), minlength=vocab + 1)[1:] + 1.0
    log_probs = np.log(counts / counts.sum())
    test_codes = np.concatenate(test)
    return float(-log_probs[test_codes - 1].mean())


def continuation_nll(lm: ContextLM, sequences: Sequence[np.ndarray], n: int = 2) -> Tuple[float, float]:
    """Per-token NLL of the final n codes of each sequence given the rest.

    Returns (lm_nll, unigram_nll); the unigram baseline is fit on the
    prefixes only, so both models see exactly the same evidence.
    """
    usable = [np.asarray(s) for s in sequences if len(s) > n]
    if not usable:
        raise EmptyCorpusError(f"continuation NLL needs sequences longer than {n} codes")
    total, count = 0.0, 0
    lm.eval()
    with torch.no_grad():
        for codes in usable:
            codes = codes[-(lm.cfg.max_context - 1):]
            seq = torch.cat([torch.tensor([BOS]), torch.as_tensor(codes, dtype=torch.long)])
            per_token = lm.lm_nll(seq, reduction="none")
            total += float(per_token[-n:].sum())
            count += n
    baseline = unigram_nll([s[:-n] for s in usable], [s[-n:] for s in usable], lm.cfg.num_codes)
    return total / count, baseline


def mode_mel_errors(model: AcousticModel, lm: ContextLM, corpus: Sequence[Utterance], speaker_id: int,
                    chunk_frames: int = 2, sampling: SamplingConfig = SamplingConfig(mode="greedy")
                    ) -> Dict[str, float]:
    """Median mel MSE of streamed conversion against offline full-context conversion, per mode"""
    errors: Dict[str, List[float]] = {mode: [] for mode in MODES}
    model.eval()
    for utt in corpus:
        with torch.no_grad():
            reference = model.convert(torch.as_tensor(utt.mel), speaker_id).numpy()
        for mode in MODES:
            session = StreamSession(model, speaker_id, StreamConfig(mode=mode, chunk_frames=chunk_frames),
                                    lm=lm if mode == "full" else None, sampling=sampling,
                                    frontend=FrontendConfig(mel_bins=model.cfg.mel_bins))
            for start in range(0, utt.num_frames, chunk_frames):
                session.push_mel(utt.mel[start:start + chunk_frames])
            session.flush()
            errors[mode].append(float(np.mean((session.converted_mel - reference) ** 2)))
    return {mode: float(np.median(values)) for mode, values in errors.items()}

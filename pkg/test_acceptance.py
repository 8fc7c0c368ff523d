#!/usr/bin/env python3
"""
End-to-end acceptance on the toy corpus: decoupling, pseudo-context utility and mode errors.
These train real models for several minutes; run with: pytest -m slow
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from data.corpus import CorpusSpec, generate_corpus
from models.acoustic import AcousticConfig, AcousticModel
from models.context_lm import ContextLM, LmConfig
from processors.probes import continuation_nll, decoupling_check, mode_mel_errors
from processors.trainer import AcousticTrainer, LmTrainConfig, LmTrainer, TrainConfig, extract_code_corpus

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def toy_corpus():
    return generate_corpus(CorpusSpec(num_speakers=8, utterances_per_speaker=50, token_vocab=16))


@pytest.fixture(scope="module")
def trained_am(toy_corpus):
    torch.manual_seed(0)
    trainer = AcousticTrainer(AcousticModel(AcousticConfig.preset("toy", num_speakers=8)),
                              TrainConfig(steps=2000, batch_size=4))
    trainer.train(toy_corpus)
    return trainer.model.eval()


@pytest.fixture(scope="module")
def trained_lm(trained_am, toy_corpus):
    torch.manual_seed(0)
    codes = extract_code_corpus(trained_am, toy_corpus, chunk_size=2)
    trainer = LmTrainer(ContextLM(LmConfig.preset("toy", trained_am.cfg.vocab)), LmTrainConfig(steps=1500))
    result = trainer.train_lm(codes)
    return trainer.lm.eval(), result.heldout_sequences


def test_codes_carry_content_but_not_speaker(trained_am, toy_corpus):
    result = decoupling_check(trained_am, toy_corpus)
    assert result.token_accuracy >= 0.90, result.summary()
    assert result.speaker_accuracy <= result.chance + 0.10, result.summary()


def test_trained_lm_beats_the_unigram_on_held_out_continuations(trained_lm):
    lm, heldout = trained_lm
    lm_nll, unigram = continuation_nll(lm, heldout, n=2)
    assert lm_nll < unigram


def test_full_mode_error_does_not_exceed_standalone(trained_am, trained_lm, toy_corpus):
    lm, _ = trained_lm
    rng = np.random.default_rng(0)
    picks = rng.choice(len(toy_corpus), size=20, replace=False)
    errors = mode_mel_errors(trained_am, lm, [toy_corpus[i] for i in picks], speaker_id=3)
    assert errors["full"] <= errors["standalone"]

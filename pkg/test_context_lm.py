#!/usr/bin/env python3
"""
Tests for the pseudo-context language model and its trainer
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from core.errors import EmptyCorpusError, ShapeError, VocabularyError
from core.gradcheck import grad_check
from models.context_lm import BOS, ContextLM, LmConfig, SamplingConfig
from data.corpus import CorpusSpec, sample_tokens
from processors.aggregator import LossAggregator
from processors.probes import continuation_nll, unigram_nll
from processors.trainer import LmTrainConfig, LmTrainer, load_context_lm, with_bos


def random_lm(seed: int = 0, num_codes: int = 6, max_context: int = 32) -> ContextLM:
    torch.manual_seed(seed)
    lm = ContextLM(LmConfig.preset("tiny", num_codes=num_codes, max_context=max_context))
    with torch.no_grad():
        lm.head.weight.normal_(0.0, 0.1)
    return lm.eval()


def test_presets_and_vocabulary_layout():
    cfg = LmConfig.preset("toy", num_codes=16)
    assert cfg.vocab == 17 and cfg.num_codes == 16
    large = LmConfig.preset("large", num_codes=150)
    assert (large.layers, large.hidden) == (4, 512)
    with pytest.raises(ValueError):
        LmConfig.preset("huge", num_codes=4)


def test_untrained_lm_predicts_uniformly():
    lm = ContextLM(LmConfig.preset("tiny", num_codes=6))
    nll = lm.lm_nll(torch.tensor([BOS, 1, 2, 3]))
    assert float(nll) == pytest.approx(math.log(7), abs=1e-6)


def test_forward_is_causal():
    lm = random_lm()
    with torch.no_grad():
        a, _ = lm.lm_forward(torch.tensor([BOS, 1, 2, 3, 4]))
        b, _ = lm.lm_forward(torch.tensor([BOS, 1, 2, 6, 6]))
    assert torch.allclose(a[:3], b[:3], atol=1e-6)
    assert not torch.allclose(a[3:], b[3:])


def test_incremental_state_matches_a_fresh_call():
    lm = random_lm()
    tokens = torch.tensor([BOS, 3, 1, 4, 1, 5])
    with torch.no_grad():
        full, full_state = lm.lm_forward(tokens)
        first, state = lm.lm_forward(tokens[:2])
        rest, state = lm.lm_forward(tokens[2:], state)
    assert torch.allclose(torch.cat([first, rest]), full, atol=1e-5)
    assert state.position == full_state.position == 6
    assert torch.allclose(state.last_logits, full[-1], atol=1e-5)


def test_forward_errors():
    lm = random_lm(max_context=8)
    with pytest.raises(ShapeError):
        lm.lm_forward(torch.zeros(0, dtype=torch.long))
    with pytest.raises(ShapeError):
        lm.lm_forward(torch.zeros(2, 2, dtype=torch.long))
    with pytest.raises(ShapeError):
        lm.lm_forward(torch.ones(9, dtype=torch.long))
    with pytest.raises(VocabularyError):
        lm.lm_forward(torch.tensor([BOS, 7]))
    with pytest.raises(ShapeError):
        lm.lm_nll(torch.tensor([BOS]))


def test_pseudo_context_generation():
    lm = random_lm()
    history = torch.tensor([1, 2, 3])
    state = lm.prime(history)
    context = lm.generate_pseudo_context(history, 4, SamplingConfig(k=3, seed=1), state)
    assert context.frames == 4
    assert bool(((context.codes >= 1) & (context.codes <= 6)).all())
    assert bool((context.log_probs <= 0).all())
    # the caller's state is left untouched
    assert state.position == 4

    again = lm.generate_pseudo_context(history, 4, SamplingConfig(k=3, seed=1))
    assert torch.equal(context.codes, again.codes)


def test_pseudo_context_from_a_history_longer_than_the_window():
    lm = random_lm(max_context=16)
    history = torch.tensor([1, 2, 3, 4, 5, 6] * 3)
    greedy = SamplingConfig(mode="greedy")
    context = lm.generate_pseudo_context(history, 2, greedy)
    assert context.frames == 2
    # BOS + 13 history codes + 2 generated fill the 16-position window
    recent = lm.generate_pseudo_context(history[-13:], 2, greedy)
    assert torch.equal(context.codes, recent.codes)


def test_greedy_generation_follows_the_argmax():
    lm = random_lm(seed=3)
    history = torch.tensor([2, 2])
    context = lm.generate_pseudo_context(history, 1, SamplingConfig(mode="greedy"))
    with torch.no_grad():
        logits, _ = lm.lm_forward(torch.tensor([BOS, 2, 2]))
    masked = logits[-1].clone()
    masked[BOS] = float("-inf")
    assert int(context.codes[0]) == int(masked.argmax())


def test_pseudo_context_edge_cases():
    lm = random_lm()
    empty = lm.generate_pseudo_context(torch.tensor([1]), 0, SamplingConfig())
    assert empty.frames == 0
    with pytest.raises(ValueError):
        lm.generate_pseudo_context(torch.tensor([1]), -1, SamplingConfig())
    with pytest.raises(ValueError):
        SamplingConfig(mode="beam")
    with pytest.raises(ValueError):
        SamplingConfig(temperature=0.0)


def test_lm_objective_gradients_in_double_precision():
    lm = random_lm().double().train()
    sequence = torch.tensor([BOS, 3, 1, 4, 1, 5, 2, 6, 5])
    report = grad_check(lambda: lm.lm_nll(sequence), dict(lm.named_parameters()), max_entries=3)
    assert report.passed, report.summary()


def test_with_bos_truncates_to_the_context():
    seq = with_bos(np.array([4, 5, 6, 1]), max_context=3)
    assert seq.tolist() == [BOS, 4, 5]


def test_trainer_learns_a_deterministic_pattern(tmp_path):
    torch.manual_seed(0)
    lm = ContextLM(LmConfig.preset("tiny", num_codes=4, max_context=32))
    pattern = np.tile([1, 2, 3, 4], 5)
    sequences = [np.roll(pattern, shift) for shift in range(4)] * 3
    trainer = LmTrainer(lm, LmTrainConfig(steps=150, batch_size=4, lr=1e-2))
    log_path, ckpt_path = tmp_path / "lm_loss.tsv", tmp_path / "lm.ckpt"
    result = trainer.train_lm(sequences, log_path=log_path, checkpoint_path=ckpt_path)

    assert result.first_loss == pytest.approx(math.log(5), abs=1e-5)
    assert result.epochs[-1].heldout_nll < result.first_loss
    assert trainer.step == 150
    assert log_path.read_text().splitlines()[0] == "epoch\tstep\ttrain_nll\theldout_nll"

    lm_nll, unigram = continuation_nll(trainer.lm, result.heldout_sequences, n=2)
    assert lm_nll < unigram

    restored = load_context_lm(ckpt_path, lm.cfg)
    resumed = LmTrainer(ContextLM(lm.cfg), LmTrainConfig(steps=160))
    assert resumed.resume(ckpt_path) == 150
    for a, b in zip(restored.parameters(), trainer.lm.parameters()):
        assert torch.allclose(a, b)


def test_lm_training_is_monotone_and_beats_the_unigram():
    spec = CorpusSpec(token_vocab=6)
    rng = np.random.default_rng(0)
    sequences = [sample_tokens(spec, 20, rng) for _ in range(24)]
    aggregator = LossAggregator()
    train_curves, heldout, unigram = [], [], []
    for seed in range(3):
        torch.manual_seed(seed)
        lm = ContextLM(LmConfig(layers=1, heads=2, hidden=16, intermediate=32, vocab=7, max_context=32))
        trainer = LmTrainer(lm, LmTrainConfig(steps=200, batch_size=4, lr=5e-3, seed=seed, heldout_fraction=0.25))
        result = trainer.train_lm(sequences)
        train_curves.append([epoch.train_nll for epoch in result.epochs])
        heldout.append(result.epochs[-1].heldout_nll)
        unigram.append(unigram_nll(result.train_sequences, result.train_sequences, 6))
    median = aggregator.combine(train_curves)
    assert len(median) >= 5
    assert all(later <= earlier + 0.02 for earlier, later in zip(median, median[1:]))
    assert np.median(heldout) < np.median(unigram)


def test_trainer_split_and_empty_input():
    trainer = LmTrainer(ContextLM(LmConfig.preset("tiny", num_codes=4)), LmTrainConfig(heldout_fraction=0.25))
    train, heldout = trainer.split([np.array([1, 2])] * 8)
    assert (len(train), len(heldout)) == (6, 2)
    single = [np.array([1, 2, 3])]
    assert trainer.split(single) == (single, single)
    with pytest.raises(EmptyCorpusError):
        trainer.train_lm([np.array([], dtype=np.int64)])

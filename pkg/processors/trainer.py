"""
Training loops for the acoustic model and the context LM

Both write tab-separated loss logs and resumable checkpoints (parameters,
Adam moments and meta.step in the DVC3CKPT container).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from core.checkpoint import load_checkpoint, load_into_module, module_tensors, save_checkpoint
from core.errors import EmptyCorpusError, FormatError, NonFiniteError
from core.functional import GumbelConfig
from core.optim import adam_step, build_optimizer, gumbel_temperature
from data.corpus import Utterance
from data.kmeans import kmeans_fit, pool_frames, tokenize
from models.acoustic import AcousticConfig, AcousticModel, LossBreakdown, LossWeights
from models.context_lm import BOS, ContextLM, LmConfig
from models.conformer import make_chunk_mask, sample_training_chunk

AM_PREFIX = "am."
LM_PREFIX = "lm."
STEP_KEY = "meta.step"
LOSS_COLUMNS = ("step", "rec", "hpc", "ce", "total")


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 100
    gumbel_start: float = 2.0
    gumbel_end: float = 0.5

    @classmethod
    def from_settings(cls, settings) -> "TrainConfig":
        return cls(
            steps=settings.get("train.steps"),
            batch_size=settings.get("train.batch_size"),
            lr=settings.get("train.lr"),
            betas=(settings.get("train.beta1"), settings.get("train.beta2")),
            eps=settings.get("train.eps"),
            seed=settings.get("train.seed"),
            log_interval=settings.get("train.log_interval"),
            checkpoint_interval=settings.get("train.checkpoint_interval"),
            gumbel_start=settings.get("gumbel.start_temperature"),
            gumbel_end=settings.get("gumbel.end_temperature"),
        )


@dataclass
class LmTrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    heldout_fraction: float = 0.1

    @classmethod
    def from_settings(cls, settings) -> "LmTrainConfig":
        return cls(
            steps=settings.get("lm.steps"),
            batch_size=settings.get("lm.batch_size"),
            lr=settings.get("lm.lr"),
            seed=settings.get("lm.seed"),
            heldout_fraction=settings.get("lm.heldout_fraction"),
        )


def save_training_checkpoint(path: Union[str, Path], module: torch.nn.Module, prefix: str,
                             optimizer: torch.optim.Adam, step: int) -> Path:
    tensors = module_tensors(module, prefix)
    for name, param in module.named_parameters():
        state = optimizer.state.get(param)
        if state:
            tensors[f"adam.exp_avg.{prefix}{name}"] = state["exp_avg"]
            tensors[f"adam.exp_avg_sq.{prefix}{name}"] = state["exp_avg_sq"]
    tensors[STEP_KEY] = torch.tensor([float(step)])
    return save_checkpoint(path, tensors)


def restore_training_checkpoint(path: Union[str, Path], module: torch.nn.Module, prefix: str,
                                optimizer: Optional[torch.optim.Adam] = None) -> int:
    """Load parameters (and Adam moments when an optimizer is given); returns the saved step"""
    tensors = load_checkpoint(path)
    load_into_module(module, tensors, prefix)
    step = int(tensors[STEP_KEY].item()) if STEP_KEY in tensors else 0
    if optimizer is None:
        return step
    for name, param in module.named_parameters():
        avg = tensors.get(f"adam.exp_avg.{prefix}{name}")
        avg_sq = tensors.get(f"adam.exp_avg_sq.{prefix}{name}")
        if avg is None or avg_sq is None:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(step)),
            "exp_avg": avg.to(param.dtype).clone(),
            "exp_avg_sq": avg_sq.to(param.dtype).clone(),
        }
    return step


def load_acoustic_model(path: Union[str, Path], cfg: AcousticConfig) -> AcousticModel:
    model = AcousticModel(cfg)
    restore_training_checkpoint(path, model, AM_PREFIX)
    return model.eval()


def load_context_lm(path: Union[str, Path], cfg: LmConfig) -> ContextLM:
    lm = ContextLM(cfg)
    restore_training_checkpoint(path, lm, LM_PREFIX)
    return lm.eval()


def kmeans_tokens(corpus: Sequence[Utterance], k: int, r: int, max_iters: int = 100,
                  seed: int = 0) -> List[np.ndarray]:
    """Replace ground-truth tokens by K-means units of the pooled mel frames"""
    pooled = [pool_frames(utt.mel, r) for utt in corpus]
    model = kmeans_fit(np.concatenate(pooled), k, max_iters=max_iters, seed=seed)
    return [tokenize(features, model) for features in pooled]


def format_loss_line(step: int, losses: LossBreakdown) -> str:
    return "\t".join([str(step)] + [f"{value:.9g}" for value in (losses.rec, losses.hpc, losses.ce, losses.total)])


class AcousticTrainer:
    """Dynamic chunk training of the acoustic model"""

    def __init__(self, model: AcousticModel, cfg: TrainConfig = TrainConfig(),
                 weights: LossWeights = LossWeights(), verbose: bool = False):
        self.model = model
        self.cfg = cfg
        self.weights = weights
        self.verbose = verbose
        self.optimizer = build_optimizer(model.parameters(), cfg.lr, cfg.betas, cfg.eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.chunk_log: List[int] = []

    def train_step(self, batch: Sequence[Tuple[np.ndarray, np.ndarray, int]]) -> LossBreakdown:
        """One update on a batch of (mel, tokens, speaker_id); returns the batch-mean loss terms"""
        self.model.train()
        chunk = sample_training_chunk(self.rng)
        gumbel = GumbelConfig(temperature=gumbel_temperature(self.step, self.cfg.steps,
                                                             self.cfg.gumbel_start, self.cfg.gumbel_end))
        terms = []
        for mel, tokens, speaker_id in batch:
            mel_t = torch.as_tensor(mel, dtype=torch.float32)
            mask = make_chunk_mask(mel_t.size(0), chunk)
            terms.append(self.model.training_loss(mel_t, torch.as_tensor(tokens), int(speaker_id), mask,
                                                  gumbel, self.weights, self.generator))

        losses = LossBreakdown.combine(
            torch.stack([t.rec for t in terms]).mean(),
            torch.stack([t.hpc for t in terms]).mean(),
            torch.stack([t.ce for t in terms]).mean(),
            self.weights,
        )
        for name in ("rec", "hpc", "ce"):
            if not bool(torch.isfinite(getattr(losses, name))):
                raise NonFiniteError(f"step {self.step + 1}, chunk size {chunk}: {name} loss is not finite")

        losses.total.backward()
        adam_step(self.optimizer)
        self.step += 1
        self.chunk_log.append(chunk)
        return losses.as_floats()

    def train(self, corpus: Sequence[Utterance], tokens: Optional[Sequence[np.ndarray]] = None,
              log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None) -> List[LossBreakdown]:
        """Run until cfg.steps total steps; tokens default to the corpus ground truth"""
        if not corpus:
            raise EmptyCorpusError("acoustic training needs at least one utterance")
        tokens = tokens if tokens is not None else [utt.tokens for utt in corpus]
        history = []
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            if log is not None and log.tell() == 0:
                log.write("\t".join(LOSS_COLUMNS) + "\n")
            while self.step < self.cfg.steps:
                size = min(self.cfg.batch_size, len(corpus))
                picks = self.rng.choice(len(corpus), size=size, replace=False)
                batch = [(corpus[i].mel, tokens[i], corpus[i].speaker_id) for i in picks]
                losses = self.train_step(batch)
                history.append(losses)
                if log is not None:
                    log.write(format_loss_line(self.step, losses) + "\n")
                if self.verbose and (self.step % self.cfg.log_interval == 0 or self.step == 1):
                    print(f"   📊 step {self.step}: total={losses.total:.4f} rec={losses.rec:.4f} "
                          f"hpc={losses.hpc:.4f} ce={losses.ce:.4f}")
                if checkpoint_path and self.step % self.cfg.checkpoint_interval == 0:
                    self.save(checkpoint_path)
        finally:
            if log is not None:
                log.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return history

    def save(self, path: Path) -> Path:
        return save_training_checkpoint(path, self.model, AM_PREFIX, self.optimizer, self.step)

    def resume(self, path: Path) -> int:
        self.step = restore_training_checkpoint(path, self.model, AM_PREFIX, self.optimizer)
        self.rng = np.random.default_rng([self.cfg.seed, self.step])
        self.generator = torch.Generator().manual_seed(self.cfg.seed + self.step)
        return self.step


def extract_code_corpus(model: AcousticModel, corpus: Sequence[Utterance], chunk_size: int) -> List[np.ndarray]:
    """Codes of every utterance from a frozen acoustic model under a streaming chunk mask"""
    model.eval()
    with torch.no_grad():
        return [model.extract_codes(torch.as_tensor(utt.mel), chunk_size).numpy() for utt in corpus]


def with_bos(codes: np.ndarray, max_context: int) -> torch.Tensor:
    """BOS followed by at most max_context - 1 leading codes"""
    return torch.cat([torch.tensor([BOS]), torch.as_tensor(codes[:max_context - 1], dtype=torch.long)])


@dataclass
class LmEpoch:
    epoch: int
    step: int
    train_nll: float
    heldout_nll: float


@dataclass
class LmTrainResult:
    epochs: List[LmEpoch] = field(default_factory=list)
    first_loss: Optional[float] = None
    train_sequences: List[np.ndarray] = field(default_factory=list)
    heldout_sequences: List[np.ndarray] = field(default_factory=list)


class LmTrainer:
    """Next-token training of the context LM on extracted code sequences"""

    def __init__(self, lm: ContextLM, cfg: LmTrainConfig = LmTrainConfig(), verbose: bool = False):
        self.lm = lm
        self.cfg = cfg
        self.verbose = verbose
        self.optimizer = build_optimizer(lm.parameters(), cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    def split(self, sequences: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """(train, held-out); a single sequence serves as both"""
        if len(sequences) < 2:
            return list(sequences), list(sequences)
        order = self.rng.permutation(len(sequences))
        held = min(max(int(round(self.cfg.heldout_fraction * len(sequences))), 1), len(sequences) - 1)
        return [sequences[i] for i in order[held:]], [sequences[i] for i in order[:held]]

    def sequence_nll(self, sequences: Sequence[np.ndarray]) -> float:
        """Mean per-token NLL over a set of sequences"""
        total, count = 0.0, 0
        self.lm.eval()
        with torch.no_grad():
            for codes in sequences:
                seq = with_bos(codes, self.lm.cfg.max_context)
                total += float(self.lm.lm_nll(seq, reduction="sum"))
                count += seq.numel() - 1
        return total / max(count, 1)

    def train_lm(self, sequences: Sequence[np.ndarray], log_path: Optional[Path] = None,
                 checkpoint_path: Optional[Path] = None) -> LmTrainResult:
        sequences = [np.asarray(s) for s in sequences if len(s) > 0]
        if not sequences:
            raise EmptyCorpusError("LM training needs at least one non-empty code sequence")
        train, heldout = self.split(sequences)
        result = LmTrainResult(train_sequences=train, heldout_sequences=heldout)
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        epoch = 0
        try:
            if log is not None and log.tell() == 0:
                log.write("epoch\tstep\ttrain_nll\theldout_nll\n")
            while self.step < self.cfg.steps:
                epoch += 1
                order = self.rng.permutation(len(train))
                losses = []
                for start in range(0, len(order), self.cfg.batch_size):
                    if self.step >= self.cfg.steps:
                        break
                    batch = [train[i] for i in order[start:start + self.cfg.batch_size]]
                    loss = self.train_step(batch)
                    if result.first_loss is None:
                        result.first_loss = loss
                    losses.append(loss)
                record = LmEpoch(epoch, self.step, float(np.mean(losses)), self.sequence_nll(heldout))
                result.epochs.append(record)
                if log is not None:
                    log.write(f"{record.epoch}\t{record.step}\t{record.train_nll:.6f}\t{record.heldout_nll:.6f}\n")
                if self.verbose:
                    print(f"   📊 epoch {epoch} (step {self.step}): train NLL {record.train_nll:.4f}, "
                          f"held-out NLL {record.heldout_nll:.4f}")
        finally:
            if log is not None:
                log.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return result

    def train_step(self, batch: Sequence[np.ndarray]) -> float:
        """Mean of per-sequence token-averaged NLL, one Adam update"""
        self.lm.train()
        losses = [self.lm.lm_nll(with_bos(codes, self.lm.cfg.max_context)) for codes in batch]
        loss = torch.stack(losses).mean()
        if not bool(torch.isfinite(loss)):
            raise NonFiniteError(f"LM step {self.step + 1}: NLL is not finite")
        loss.backward()
        adam_step(self.optimizer)
        self.step += 1
        return float(loss)

    def save(self, path: Path) -> Path:
        return save_training_checkpoint(path, self.lm, LM_PREFIX, self.optimizer, self.step)

    def resume(self, path: Path) -> int:
        self.step = restore_training_checkpoint(path, self.lm, LM_PREFIX, self.optimizer)
        self.rng = np.random.default_rng([self.cfg.seed, self.step])
        return self.step


def read_loss_log(path: Union[str, Path]) -> List[Dict[str, float]]:
    """Rows of a tab-separated log with a header line"""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"empty loss log {path}")
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        if not line.strip() or line.startswith(header[0]):
            continue
        rows.append({key: float(value) for key, value in zip(header, line.split("\t"))})
    return rows

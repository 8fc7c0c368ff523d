"""
Acoustic model: content encoder -> discrete bottleneck -> decoder

Trained with L = alpha * rec + beta * hpc + gamma * ce, where ce distills the
encoder towards external semantic tokens and hpc is the hybrid predictive
coding auxiliary loss on the middle encoder block.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import ShapeError, VocabularyError
from core.functional import GumbelConfig, cross_entropy, gumbel_softmax, mse
from models.conformer import ChunkMask, ConformerConfig, ConformerStack, make_chunk_mask

HPC_PREFIX = "hpc."


@dataclass
class AcousticConfig:
    mel_bins: int = 80
    vocab: int = 16
    downsample: int = 2
    speaker_dim: int = 64
    num_speakers: int = 8
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    decoder: ConformerConfig = field(default_factory=ConformerConfig)
    hpc_shift: int = 6
    cpc_negatives: int = 10
    cpc_dim: int = 32

    def __post_init__(self):
        if self.encoder.dim != self.decoder.dim:
            raise ValueError("encoder and decoder must share the model dimension")
        if self.vocab < 2 or self.downsample < 1:
            raise ValueError("vocab must be >= 2 and downsample >= 1")

    @property
    def dim(self) -> int:
        return self.encoder.dim

    def token_length(self, num_frames: int) -> int:
        return math.ceil(num_frames / self.downsample)

    @classmethod
    def preset(cls, name: str, num_speakers: int = 8, vocab: Optional[int] = None,
               max_history: int = 64) -> "AcousticConfig":
        """tiny: grad-check scale, toy: default desk scale, large (alias paper): 6+6 blocks of width 256"""
        if name == "tiny":
            stack = ConformerConfig(num_blocks=2, dim=8, heads=2, conv_kernel=3, max_history=max_history)
            return cls(mel_bins=8, vocab=vocab or 6, speaker_dim=4, num_speakers=num_speakers,
                       encoder=stack, decoder=stack, cpc_dim=4)
        if name == "toy":
            stack = ConformerConfig(num_blocks=4, dim=64, heads=4, max_history=max_history)
            return cls(vocab=vocab or 16, num_speakers=num_speakers, encoder=stack, decoder=stack)
        if name in ("large", "paper"):
            stack = ConformerConfig(num_blocks=6, dim=256, heads=4, max_history=max_history)
            return cls(vocab=vocab or 150, num_speakers=num_speakers, encoder=stack, decoder=stack,
                       cpc_dim=256)
        raise ValueError(f"unknown model preset '{name}'")


@dataclass
class LossWeights:
    alpha: float = 45.0
    beta: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Loss terms; total is exactly alpha*rec + beta*hpc + gamma*ce"""
    rec: torch.Tensor
    hpc: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor

    @classmethod
    def combine(cls, rec, hpc, ce, weights: LossWeights) -> "LossBreakdown":
        total = weights.alpha * rec + weights.beta * hpc + weights.gamma * ce
        return cls(rec=rec, hpc=hpc, ce=ce, total=total)

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(t) for t in (self.rec, self.hpc, self.ce, self.total)))


@dataclass
class SpeakerEmbedding:
    speaker_id: int
    vector: torch.Tensor


class EncoderOutput(NamedTuple):
    z: torch.Tensor
    intermediate: torch.Tensor


class Discretized(NamedTuple):
    codes: torch.Tensor             # (T,) 1-based code ids
    soft: Optional[torch.Tensor]    # (T, N) straight-through sample, training only


class SpeakerTable(nn.Module):
    """Learned speaker embeddings, L2-normalised on lookup"""

    def __init__(self, num_speakers: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(num_speakers, dim)

    def lookup(self, speaker_id: int) -> SpeakerEmbedding:
        if not 0 <= speaker_id < self.table.num_embeddings:
            raise VocabularyError(f"speaker {speaker_id} not in 0..{self.table.num_embeddings - 1}")
        vector = F.normalize(self.table.weight[speaker_id], dim=-1)
        return SpeakerEmbedding(speaker_id, vector)


class HpcHeads(nn.Module):
    """APC regression head and CPC projections; discarded at inference"""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.apc = nn.Linear(cfg.dim, cfg.mel_bins)
        self.cpc_context = nn.Linear(cfg.dim, cfg.cpc_dim)
        self.cpc_target = nn.Linear(cfg.dim, cfg.cpc_dim)


class AcousticModel(nn.Module):
    """Content encoder, token projection, code embedding, speaker table and decoder"""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_in = nn.Linear(cfg.mel_bins, cfg.dim)
        self.encoder = ConformerStack(cfg.encoder)
        self.token_proj = nn.Linear(cfg.dim, cfg.vocab)
        self.code_embed = nn.Embedding(cfg.vocab, cfg.dim)
        self.speakers = SpeakerTable(cfg.num_speakers, cfg.speaker_dim)
        self.decoder_in = nn.Linear(cfg.dim + cfg.speaker_dim, cfg.dim)
        self.decoder = ConformerStack(cfg.decoder)
        self.mel_out = nn.Linear(cfg.dim, cfg.mel_bins)
        self.hpc = HpcHeads(cfg)

    def inference_parameters(self) -> int:
        """Parameter count without the training-only HPC heads"""
        return sum(p.numel() for name, p in self.named_parameters() if not name.startswith(HPC_PREFIX))

    def encode(self, mel: torch.Tensor, mask: ChunkMask) -> EncoderOutput:
        if mel.dim() != 2 or mel.size(1) != self.cfg.mel_bins:
            raise ShapeError(f"expected mel of shape (T_m, {self.cfg.mel_bins}), got {tuple(mel.shape)}")
        z, middle = self.encoder(self.encoder_in(mel), mask)
        return EncoderOutput(z, middle)

    def pool(self, z: torch.Tensor) -> torch.Tensor:
        """Mean over non-overlapping windows of r frames; the last window may be short"""
        r = self.cfg.downsample
        full, tail = divmod(z.size(0), r)
        pooled = [z[:full * r].view(full, r, -1).mean(dim=1)] if full else []
        if tail:
            pooled.append(z[full * r:].mean(dim=0, keepdim=True))
        return torch.cat(pooled, dim=0)

    def downsample_project(self, z: torch.Tensor) -> torch.Tensor:
        """Z (T_m, D) -> Z' (ceil(T_m / r), N) token logits"""
        return self.token_proj(self.pool(z))

    def discretize(self, zprime: torch.Tensor, cfg: Optional[GumbelConfig] = None, training: bool = False,
                   generator: Optional[torch.Generator] = None) -> Discretized:
        if not training:
            return Discretized(zprime.argmax(dim=-1) + 1, None)
        sample, indices = gumbel_softmax(zprime, cfg or GumbelConfig(), generator)
        return Discretized(indices + 1, sample)

    def embed_codes(self, codes: torch.Tensor, soft: Optional[torch.Tensor] = None) -> torch.Tensor:
        if soft is not None:
            # expected embedding keeps the path differentiable
            return soft @ self.code_embed.weight
        if bool(((codes < 1) | (codes > self.cfg.vocab)).any()):
            raise VocabularyError(f"codes must lie in 1..{self.cfg.vocab}")
        return self.code_embed(codes.long() - 1)

    def decoder_inputs(self, codes: torch.Tensor, speaker: SpeakerEmbedding, num_frames: int,
                       soft: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Embed, repeat each code r times (trimmed to num_frames), append the speaker vector, project"""
        frames = self.embed_codes(codes, soft).repeat_interleave(self.cfg.downsample, dim=0)[:num_frames]
        if frames.size(0) != num_frames:
            raise ShapeError(f"{codes.size(0)} codes cannot cover {num_frames} frames")
        return self._with_speaker(frames, speaker)

    def decoder_rows(self, frame_codes: torch.Tensor, speaker: SpeakerEmbedding) -> torch.Tensor:
        """Decoder input rows for frames whose codes are given one per frame"""
        return self._with_speaker(self.embed_codes(frame_codes), speaker)

    def _with_speaker(self, frames: torch.Tensor, speaker: SpeakerEmbedding) -> torch.Tensor:
        spk = speaker.vector.to(frames.dtype).expand(frames.size(0), -1)
        return self.decoder_in(torch.cat([frames, spk], dim=-1))

    def decode(self, codes: torch.Tensor, speaker: SpeakerEmbedding, mask: ChunkMask,
               soft: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.decoder_inputs(codes, speaker, mask.size, soft)
        y, _ = self.decoder(x, mask)
        return self.mel_out(y)

    def hpc_loss(self, intermediate: torch.Tensor, mel: torch.Tensor,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """APC (L1 to mel k frames ahead) + CPC (InfoNCE against random other frames)"""
        k = self.cfg.hpc_shift
        num_frames = intermediate.size(0)
        if num_frames <= k:
            return intermediate.new_zeros(())

        apc = F.l1_loss(self.hpc.apc(intermediate[:-k]), mel[k:])

        context = self.hpc.cpc_context(intermediate[:-k])
        targets = self.hpc.cpc_target(intermediate)
        steps = num_frames - k
        positive_index = torch.arange(k, num_frames)
        # uniform over the other num_frames - 1 frames
        draws = torch.randint(0, num_frames - 1, (steps, self.cfg.cpc_negatives), generator=generator)
        negative_index = draws + (draws >= positive_index.unsqueeze(1)).long()

        positive = (context * targets[positive_index]).sum(dim=-1, keepdim=True)
        negative = torch.einsum("td,tnd->tn", context, targets[negative_index])
        scores = torch.cat([positive, negative], dim=1)
        cpc = F.cross_entropy(scores, torch.zeros(steps, dtype=torch.long))
        return apc + cpc

    def acoustic_loss(self, mel: torch.Tensor, mel_hat: torch.Tensor, zprime: torch.Tensor,
                      tokens: torch.Tensor, intermediate: torch.Tensor, weights: LossWeights,
                      generator: Optional[torch.Generator] = None) -> LossBreakdown:
        if zprime.size(0) != tokens.size(0):
            raise ShapeError(f"{tokens.size(0)} tokens for {zprime.size(0)} latent rows")
        rec = mse(mel, mel_hat)
        ce = cross_entropy(zprime, tokens)
        hpc = self.hpc_loss(intermediate, mel, generator)
        return LossBreakdown.combine(rec, hpc, ce, weights)

    def training_loss(self, mel: torch.Tensor, tokens: torch.Tensor, speaker_id: int, mask: ChunkMask,
                      gumbel: GumbelConfig, weights: LossWeights,
                      generator: Optional[torch.Generator] = None) -> LossBreakdown:
        """encode -> downsample_project -> discretize(training) -> decode -> acoustic_loss"""
        encoded = self.encode(mel, mask)
        zprime = self.downsample_project(encoded.z)
        discrete = self.discretize(zprime, gumbel, training=True, generator=generator)
        mel_hat = self.decode(discrete.codes, self.speakers.lookup(speaker_id), mask, discrete.soft)
        return self.acoustic_loss(mel, mel_hat, zprime, tokens, encoded.intermediate, weights, generator)

    def latents(self, mel: torch.Tensor, chunk_size: int = 0) -> torch.Tensor:
        """Z' rows of an utterance under inference conditions"""
        mask = self._mask(mel.size(0), chunk_size, self.cfg.encoder)
        return self.downsample_project(self.encode(mel, mask).z)

    def extract_codes(self, mel: torch.Tensor, chunk_size: int = 0) -> torch.Tensor:
        return self.discretize(self.latents(mel, chunk_size)).codes

    def convert(self, mel: torch.Tensor, speaker_id: int, chunk_size: int = 0) -> torch.Tensor:
        """Offline stand-alone conversion of a whole utterance under one chunk mask.

        With chunk_size > 0 the masks also bound the left history at max_history,
        which is exactly what a streaming session sees.
        """
        codes = self.extract_codes(mel, chunk_size)
        mask = self._mask(mel.size(0), chunk_size, self.cfg.decoder)
        return self.decode(codes, self.speakers.lookup(speaker_id), mask)

    @staticmethod
    def _mask(num_frames: int, chunk_size: int, stack: ConformerConfig) -> ChunkMask:
        left = stack.max_history if chunk_size > 0 else None
        return make_chunk_mask(num_frames, chunk_size, left)

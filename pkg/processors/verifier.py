"""
Verification suites run by `main.py verify`

Every check returns a CheckResult; none of them raises. The suites use tiny
models with random weights, so they run on a fresh checkout.
"""

import math
import time
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from scipy.stats import chisquare

from core.checkpoint import load_checkpoint
from core.functional import GumbelConfig, cross_entropy, gumbel_softmax, quiet_softmax
from core.gradcheck import grad_check
from data.corpus import CorpusSpec, generate_corpus, load_corpus
from models.acoustic import AcousticConfig, AcousticModel, LossWeights
from models.conformer import TRAINING_MAX_CHUNK, make_chunk_mask, sample_training_chunk
from models.context_lm import BOS, ContextLM, LmConfig
from processors.report_generator import CheckResult
from streaming.frontend import FrontendConfig, MelFrontend, mel_frontend
from streaming.latency import LatencyReport
from streaming.session import StreamConfig, StreamSession
from streaming.wire import bitrate_bps, compression_ratio, wire_decode, wire_encode

CheckFn = Callable[[], Tuple[bool, str]]


def run_check(name: str, invariant: str, check: CheckFn) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, detail = check()
    except Exception as e:
        passed, detail = False, f"{type(e).__name__}: {e}"
    return CheckResult(name, invariant, bool(passed), detail, time.perf_counter() - started)


def brute_force_mask(num_frames: int, chunk_size: int) -> np.ndarray:
    allowed = np.zeros((num_frames, num_frames), dtype=bool)
    for i in range(num_frames):
        for j in range(num_frames):
            allowed[i, j] = chunk_size == 0 or j < (i // chunk_size + 1) * chunk_size
    return allowed


def check_mask_oracle() -> Tuple[bool, str]:
    mismatches = []
    for num_frames in range(1, 17):
        for chunk in range(0, TRAINING_MAX_CHUNK + 1):
            built = make_chunk_mask(num_frames, chunk).matrix.numpy()
            if not np.array_equal(built, brute_force_mask(num_frames, chunk)):
                mismatches.append((num_frames, chunk))
    return not mismatches, f"{16 * (TRAINING_MAX_CHUNK + 1)} masks, mismatches: {mismatches or 'none'}"


def check_chunk_sampler(draws: int = 10_000, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    counts = np.bincount([sample_training_chunk(rng) for _ in range(draws)], minlength=TRAINING_MAX_CHUNK + 1)
    expected = np.array([0.5] + [0.5 / TRAINING_MAX_CHUNK] * TRAINING_MAX_CHUNK) * draws
    p_value = float(chisquare(counts, expected).pvalue)
    p_full = counts[0] / draws
    return abs(p_full - 0.5) <= 0.02 and p_value >= 0.01, f"P(0)={p_full:.3f}, chi-square p={p_value:.3f}"


def check_quiet_softmax() -> Tuple[bool, str]:
    pair = quiet_softmax(torch.zeros(2, dtype=torch.float64))
    masked = quiet_softmax(torch.tensor([1.0, 2.0]), torch.tensor([False, False]))
    logits = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    direct = torch.exp(logits - 3.0) / (math.exp(-3.0) + torch.exp(logits - 3.0).sum())
    ok = (torch.allclose(pair, torch.full((2,), 1.0 / 3.0, dtype=torch.float64))
          and bool((masked == 0).all())
          and torch.allclose(quiet_softmax(logits), direct))
    return ok, "[0,0] -> [1/3,1/3], fully masked -> zeros, [1,2,3] matches direct formula"


def check_gumbel(draws: int = 10_000) -> Tuple[bool, str]:
    generator = torch.Generator().manual_seed(0)
    peaked = torch.tensor([[10.0, -10.0]]).expand(1000, -1)
    _, picks = gumbel_softmax(peaked, GumbelConfig(temperature=0.1), generator)
    share = float((picks == 0).double().mean())

    _, uniform = gumbel_softmax(torch.zeros(draws, 4), GumbelConfig(temperature=1.0), generator)
    counts = np.bincount(uniform.numpy(), minlength=4)
    sigma = math.sqrt(draws * 0.25 * 0.75)
    spread = float(np.abs(counts - draws / 4).max() / sigma)

    sample, _ = gumbel_softmax(torch.randn(8, 5, generator=generator), GumbelConfig(), generator)
    one_hot = bool(((sample == 0) | (sample == 1)).all()) and bool((sample.sum(dim=1) == 1).all())
    return share >= 0.999 and spread <= 3.0 and one_hot, \
        f"peaked row picks argmax {share:.4f}, uniform histogram within {spread:.2f} sigma"


def check_straight_through() -> Tuple[bool, str]:
    """The hard sample carries the gradient of the soft sample"""
    weights = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    grads = []
    for hard in (True, False):
        logits = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2),
                             requires_grad=True)
        sample, _ = gumbel_softmax(logits, GumbelConfig(temperature=0.7, hard=hard),
                                   torch.Generator().manual_seed(3))
        (sample * weights).sum().backward()
        grads.append(logits.grad)
    gap = float((grads[0] - grads[1]).abs().max())
    return gap < 1e-12, f"hard vs soft gradient gap {gap:.2e}"


def check_cross_entropy() -> Tuple[bool, str]:
    uniform = float(cross_entropy(torch.zeros(4, 150, dtype=torch.float64), torch.tensor([1, 50, 100, 150])))
    hand = float(cross_entropy(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64), torch.tensor([1, 2])))
    expected = math.log(1.0 + math.exp(-1.0))
    return abs(uniform - math.log(150)) < 1e-9 and abs(hand - expected) < 1e-9, \
        f"uniform N=150 -> {uniform:.4f}, hand case -> {hand:.6f}"


def tiny_acoustic_model(max_history: int = 64, seed: int = 0, dtype=torch.float32) -> AcousticModel:
    torch.manual_seed(seed)
    return AcousticModel(AcousticConfig.preset("tiny", num_speakers=3, max_history=max_history)).to(dtype).eval()


def check_acoustic_gradients(max_entries: int = 3) -> Tuple[bool, str]:
    """Full weighted objective in 64-bit, soft Gumbel path with frozen noise"""
    model = tiny_acoustic_model(dtype=torch.float64).train()
    rng = np.random.default_rng(0)
    mel = torch.as_tensor(rng.normal(size=(12, model.cfg.mel_bins)))
    tokens = torch.as_tensor(rng.integers(1, model.cfg.vocab + 1, size=6))
    mask = make_chunk_mask(12, 2)
    gumbel = GumbelConfig(temperature=1.0, hard=False)

    def objective() -> torch.Tensor:
        generator = torch.Generator().manual_seed(0)
        return model.training_loss(mel, tokens, 1, mask, gumbel, LossWeights(), generator).total

    params = {name: p for name, p in model.named_parameters()}
    report = grad_check(objective, params, max_entries=max_entries)
    return report.passed, report.summary()


def check_lm_gradients(max_entries: int = 3) -> Tuple[bool, str]:
    torch.manual_seed(0)
    lm = ContextLM(LmConfig.preset("tiny", num_codes=6, max_context=32)).double()
    with torch.no_grad():
        lm.head.weight.normal_(0.0, 0.1)
    sequence = torch.tensor([BOS, 3, 1, 4, 1, 5, 2, 6, 5])
    report = grad_check(lambda: lm.lm_nll(sequence), dict(lm.named_parameters()), max_entries=max_entries)
    return report.passed, report.summary()


def streamed_mel(model: AcousticModel, mel: np.ndarray, speaker_id: int, chunk_frames: int,
                 piece: int = 3) -> np.ndarray:
    """Stand-alone session fed with ragged pieces of mel"""
    session = StreamSession(model, speaker_id, StreamConfig(chunk_frames=chunk_frames),
                            frontend=FrontendConfig(mel_bins=model.cfg.mel_bins))
    for start in range(0, mel.shape[0], piece):
        session.push_mel(mel[start:start + piece])
    session.flush()
    return session.converted_mel


def check_streaming_equivalence(chunks=(1, 2, 4), speakers: int = 3, per_speaker: int = 7) -> Tuple[bool, str]:
    model = tiny_acoustic_model(max_history=8)
    corpus = generate_corpus(CorpusSpec(num_speakers=speakers, utterances_per_speaker=per_speaker, token_vocab=6,
                                        mel_bins=model.cfg.mel_bins, min_tokens=8, max_tokens=16))
    worst = 0.0
    for chunk in chunks:
        for utt in corpus:
            with torch.no_grad():
                offline = model.convert(torch.as_tensor(utt.mel), utt.speaker_id, chunk).numpy()
            streamed = streamed_mel(model, utt.mel, utt.speaker_id, chunk)
            if streamed.shape != offline.shape:
                return False, f"chunk {chunk}: streamed {streamed.shape} vs offline {offline.shape}"
            worst = max(worst, float(np.abs(streamed - offline).max()))
    return worst <= 1e-4, (f"max abs mel difference {worst:.2e} over {len(corpus)} utterances, "
                           f"chunks {list(chunks)}")


def check_codec(sequences: int = 10_000, vocab: int = 150) -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    for _ in range(sequences):
        codes = rng.integers(1, vocab + 1, size=int(rng.integers(0, 64)))
        if not np.array_equal(wire_decode(wire_encode(codes, vocab)), codes):
            return False, f"round trip changed {codes.tolist()}"
    bitrate, ratio = bitrate_bps(50), compression_ratio(50)
    return bitrate == 400 and ratio == 640, f"{sequences} round trips, {bitrate} bps, {ratio:g}x smaller than pcm"


def check_frontend() -> Tuple[bool, str]:
    cfg = FrontendConfig()
    pcm = np.random.default_rng(0).normal(scale=0.1, size=cfg.sample_rate // 4)
    offline = mel_frontend(pcm, cfg)
    frontend = MelFrontend(cfg)
    pieces = [frontend.push(pcm[i:i + 137]) for i in range(0, pcm.size, 137)]
    online = np.concatenate(pieces)
    ok = online.shape == offline.shape == (cfg.num_frames(pcm.size), cfg.mel_bins) and np.array_equal(online, offline)
    return ok, f"{offline.shape[0]} frames, incremental == offline"


def check_latency_identity() -> Tuple[bool, str]:
    report = LatencyReport.build("standalone", {"am": 1.25, "lm": 0.0, "vocoder": 3.5}, 20, 20, 1000)
    return report.identity_holds() and report.total_ms == 44.75, report.to_text().splitlines()[-1]


def check_checkpoint(path: Path) -> Tuple[bool, str]:
    tensors = load_checkpoint(path)
    bad = [name for name, t in tensors.items() if t.is_floating_point() and not bool(torch.isfinite(t).all())]
    return not bad, f"{len(tensors)} tensors" + (f", non-finite: {bad}" if bad else "")


def check_corpus(directory: Path) -> Tuple[bool, str]:
    corpus = load_corpus(directory)
    return bool(corpus), f"{len(corpus)} utterances"


def verify_all(checkpoint_dir: Optional[Path] = None, corpus_dir: Optional[Path] = None,
               verbose: bool = False) -> List[CheckResult]:
    suites = [
        ("mask_oracle", "chunk mask equals the brute-force definition for T<=16, c<=8", check_mask_oracle),
        ("chunk_sampler", "training chunk sizes: 50% full, rest uniform in 1..8", check_chunk_sampler),
        ("quiet_softmax", "quiet softmax examples", check_quiet_softmax),
        ("gumbel_softmax", "Gumbel-max sampling and one-hot forward", check_gumbel),
        ("straight_through", "hard sample gradient equals soft sample gradient", check_straight_through),
        ("cross_entropy", "cross entropy closed forms", check_cross_entropy),
        ("grad_acoustic", "full acoustic objective passes finite differences", check_acoustic_gradients),
        ("grad_lm", "LM objective passes finite differences", check_lm_gradients),
        ("streaming_equivalence", "chunked stand-alone conversion equals offline under the chunk mask",
         check_streaming_equivalence),
        ("codec", "wire round trip is bit-exact, 400 bps, 640x", check_codec),
        ("frontend", "incremental mel frontend equals offline framing", check_frontend),
        ("latency_identity", "total = inference + chunk wait + lookahead", check_latency_identity),
    ]
    if corpus_dir is not None and Path(corpus_dir).exists():
        suites.append(("corpus", f"corpus at {corpus_dir} loads", lambda: check_corpus(Path(corpus_dir))))
    if checkpoint_dir is not None and Path(checkpoint_dir).exists():
        for path in sorted(Path(checkpoint_dir).glob("*.ckpt")):
            suites.append((f"checkpoint:{path.name}", f"{path.name} decodes with finite tensors",
                           lambda p=path: check_checkpoint(p)))

    results = []
    for name, invariant, check in suites:
        result = run_check(name, invariant, check)
        if verbose:
            print(f"   {'✅' if result.passed else '❌'} {name}: {result.detail} ({result.seconds:.1f} s)")
        results.append(result)
    return results

#!/usr/bin/env python3
"""
DualVC - toy streaming voice conversion
Main application entry point
"""

import argparse
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

import librosa
import numpy as np
import soundfile as sf
import torch

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from config.builders import (acoustic_config, corpus_spec, frontend_config, lm_config, loss_weights,
                             sampling_config, stream_config)
from config.settings import Settings
from core.checkpoint import load_checkpoint
from core.errors import ConfigError, DualVCError, FormatError, MissingModelError, VocabularyError
from data.code_corpus import save_code_corpus
from data.corpus import generate_corpus, load_corpus, load_spec, save_corpus
from models.acoustic import AcousticModel
from models.context_lm import ContextLM
from processors.aggregator import LossAggregator, LossEntry
from processors.probes import continuation_nll, unigram_nll
from processors.report_generator import VerifyReportGenerator, format_check_lines
from processors.trainer import (AM_PREFIX, AcousticTrainer, LmTrainConfig, LmTrainer, TrainConfig,
                                extract_code_corpus, kmeans_tokens, load_acoustic_model, load_context_lm,
                                read_loss_log)
from processors.verifier import verify_all
from streaming.frontend import mel_frontend
from streaming.latency import measure_latency, preset_parameter_counts
from streaming.session import MODES, StreamSession
from streaming.vocoder import MelVocoder

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_MISSING_MODEL = 4
EXIT_VERIFY_FAILED = 5

AM_CHECKPOINT = "am.ckpt"
LM_CHECKPOINT = "lm.ckpt"
AM_LOG = "am_loss.tsv"
LM_LOG = "lm_loss.tsv"
CODES_FILE = "codes.bin"
SAMPLE_RATE = 16000


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='DualVC - toy streaming voice conversion')
    parser.add_argument('--config', type=str, default='config/run.conf',
                        help='Path to the key=value run configuration')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a configuration key (repeatable)')
    parser.add_argument('--seed', type=int, help='Seed for every random stage')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-data', help='Generate the synthetic multi-speaker corpus')
    gen.add_argument('--speakers', type=int, help='Number of speakers')
    gen.add_argument('--utterances', type=int, help='Utterances per speaker')
    gen.add_argument('--vocab', type=int, help='Ground-truth token vocabulary')
    gen.add_argument('--out', type=str, help='Corpus directory (default paths.corpus)')

    am = commands.add_parser('train-am', help='Train the acoustic model')
    am.add_argument('--corpus', type=str, help='Corpus directory (default paths.corpus)')
    am.add_argument('--steps', type=int, help='Total training steps')
    am.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')
    am.add_argument('--dump-latents', type=str, metavar='TSV',
                    help='After training, write Z\' rows with speaker ids for external plotting')

    lm = commands.add_parser('train-lm', help='Train the context LM on codes from the frozen acoustic model')
    lm.add_argument('--corpus', type=str, help='Corpus directory (default paths.corpus)')
    lm.add_argument('--steps', type=int, help='Total training steps')
    lm.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')

    convert = commands.add_parser('convert', help='Convert a WAV file to a target speaker')
    convert.add_argument('input', type=str, help='Input WAV')
    convert.add_argument('output', type=str, help='Output WAV (16 kHz, 16-bit)')
    convert.add_argument('--target-speaker', type=int, required=True, help='Target speaker id')
    convert.add_argument('--mode', choices=MODES, help='Streaming mode')
    convert.add_argument('--chunk-ms', type=int, help='Chunk length in ms (multiple of 10)')
    convert.add_argument('--offline', action='store_true', help='Whole-utterance conversion, full-sequence mask')

    bench = commands.add_parser('bench', help='Latency, real-time factor and parameter counts')
    bench.add_argument('--input', type=str, help='WAV to stream (default: 2 s synthetic chirp)')
    bench.add_argument('--presets', action='store_true', help='Only print parameter counts of every preset')

    commands.add_parser('verify', help='Run the verification suites and write a report')
    return parser


def load_settings(args) -> Settings:
    settings = Settings(args.config)
    settings.apply_overrides(args.overrides)
    if args.seed is not None:
        for key in ('train.seed', 'lm.seed', 'corpus.seed', 'sampling.seed'):
            settings.set(key, args.seed)
    return settings


def read_wav(path: Path) -> np.ndarray:
    """Mono float samples at 16 kHz"""
    if not path.exists():
        raise FileNotFoundError(f"input audio {path} not found")
    audio, rate = sf.read(str(path), dtype='float64', always_2d=True)
    audio = audio.mean(axis=1)
    if rate != SAMPLE_RATE:
        print(f"   🔄 Resampling {rate} Hz -> {SAMPLE_RATE} Hz")
        audio = librosa.resample(audio, orig_sr=rate, target_sr=SAMPLE_RATE)
    return audio


def write_wav(path: Path, audio: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(audio, -1.0, 1.0), SAMPLE_RATE, subtype='PCM_16')


def load_models(settings: Settings, need_lm: bool) -> Tuple[AcousticModel, Optional[ContextLM]]:
    checkpoints = settings.path('checkpoints')
    am_path = checkpoints / AM_CHECKPOINT
    if not am_path.exists():
        raise MissingModelError(f"no acoustic model at {am_path}; run train-am first")
    speakers = load_checkpoint(am_path)[f"{AM_PREFIX}speakers.table.weight"].shape[0]
    am_cfg = acoustic_config(settings, num_speakers=speakers)
    model = load_acoustic_model(am_path, am_cfg)
    if not need_lm:
        return model, None
    lm_path = checkpoints / LM_CHECKPOINT
    if not lm_path.exists():
        raise MissingModelError(f"full mode needs a context LM at {lm_path}; run train-lm first")
    return model, load_context_lm(lm_path, lm_config(settings, am_cfg.vocab))


def cmd_gen_data(args, settings: Settings) -> int:
    for flag, key in (('speakers', 'corpus.speakers'), ('utterances', 'corpus.utterances'), ('vocab', 'corpus.vocab')):
        if getattr(args, flag) is not None:
            settings.set(key, getattr(args, flag))
    settings.validate()
    out = Path(args.out) if args.out else settings.path('corpus')
    spec = corpus_spec(settings, acoustic_config(settings).mel_bins)

    print(f"📊 Generating {spec.num_speakers} speakers x {spec.utterances_per_speaker} utterances...")
    corpus = generate_corpus(spec)
    save_corpus(corpus, spec, out)
    frames = sum(utt.num_frames for utt in corpus)
    print(f"   ✅ {len(corpus)} utterances, {frames} mel frames saved to {out}")
    return EXIT_OK


def cmd_train_am(args, settings: Settings) -> int:
    if args.steps is not None:
        settings.set('train.steps', args.steps)
    corpus_dir = Path(args.corpus) if args.corpus else settings.path('corpus')
    spec = load_spec(corpus_dir)
    corpus = load_corpus(corpus_dir)
    am_cfg = acoustic_config(settings, num_speakers=spec.num_speakers)
    if spec.mel_bins != am_cfg.mel_bins:
        raise ConfigError(f"corpus has {spec.mel_bins} mel bins, preset '{settings.get('model.preset')}' "
                          f"expects {am_cfg.mel_bins}")

    tokens = None
    if settings.get('train.token_source') == 'kmeans':
        print(f"🔄 Fitting K-means with K={am_cfg.vocab} on pooled mel frames...")
        tokens = kmeans_tokens(corpus, am_cfg.vocab, am_cfg.downsample,
                               settings.get('train.kmeans_iterations'), settings.get('train.seed'))
    elif spec.token_vocab != am_cfg.vocab:
        raise VocabularyError(f"corpus tokens use {spec.token_vocab} ids but model.vocab is {am_cfg.vocab}")

    checkpoints = settings.path('checkpoints')
    checkpoints.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = checkpoints / AM_CHECKPOINT, checkpoints / AM_LOG

    torch.manual_seed(settings.get('train.seed'))
    trainer = AcousticTrainer(AcousticModel(am_cfg), TrainConfig.from_settings(settings),
                              loss_weights(settings), verbose=True)
    if args.resume:
        if not ckpt_path.exists():
            raise MissingModelError(f"nothing to resume at {ckpt_path}")
        print(f"🔄 Resuming from step {trainer.resume(ckpt_path)}")
    elif log_path.exists():
        log_path.unlink()

    print(f"🚀 Training acoustic model ({settings.get('model.preset')}, {len(corpus)} utterances, "
          f"{am_cfg.num_speakers} speakers) to step {trainer.cfg.steps}")
    trainer.train(corpus, tokens, log_path=log_path, checkpoint_path=ckpt_path)

    aggregator = LossAggregator(trainer.weights)
    stats = aggregator.get_statistics([LossEntry.from_row(row) for row in read_loss_log(log_path)])
    if stats:
        print(f"   ✅ Checkpoint saved to {ckpt_path}")
        print(f"📊 Loss {stats['first_total']:.4f} -> {stats['last_total']:.4f} "
              f"(best {stats['best_total']:.4f}, weighted-sum error {stats['weighted_sum_error']:.1e})")
        print("   📉 Windowed means: " + " -> ".join(f"{m:.3f}" for m in stats['window_means']))

    if args.dump_latents:
        dump_latents(trainer.model, corpus, Path(args.dump_latents), settings.get('lm.extract_chunk'))
    return EXIT_OK


def dump_latents(model: AcousticModel, corpus, path: Path, chunk: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    model.eval()
    rows = 0
    with open(path, 'w', encoding='utf-8') as out, torch.no_grad():
        out.write('speaker\t' + '\t'.join(f'z{i}' for i in range(model.cfg.vocab)) + '\n')
        for utt in corpus:
            for row in model.latents(torch.as_tensor(utt.mel), chunk).numpy():
                out.write(f"{utt.speaker_id}\t" + '\t'.join(f'{v:.6g}' for v in row) + '\n')
                rows += 1
    print(f"   ✅ {rows} latent rows written to {path}")


def cmd_train_lm(args, settings: Settings) -> int:
    if args.steps is not None:
        settings.set('lm.steps', args.steps)
    corpus_dir = Path(args.corpus) if args.corpus else settings.path('corpus')
    corpus = load_corpus(corpus_dir)
    model, _ = load_models(settings, need_lm=False)

    checkpoints = settings.path('checkpoints')
    chunk = settings.get('lm.extract_chunk')
    print(f"🔄 Extracting codes with the frozen acoustic model (chunk {chunk})...")
    codes = extract_code_corpus(model, corpus, chunk)
    save_code_corpus(checkpoints / CODES_FILE, codes)
    print(f"   ✅ {len(codes)} code sequences saved to {checkpoints / CODES_FILE}")

    ckpt_path, log_path = checkpoints / LM_CHECKPOINT, checkpoints / LM_LOG
    torch.manual_seed(settings.get('lm.seed'))
    trainer = LmTrainer(ContextLM(lm_config(settings, model.cfg.vocab)), LmTrainConfig.from_settings(settings),
                        verbose=True)
    if args.resume:
        if not ckpt_path.exists():
            raise MissingModelError(f"nothing to resume at {ckpt_path}")
        print(f"🔄 Resuming from step {trainer.resume(ckpt_path)}")
    elif log_path.exists():
        log_path.unlink()

    print(f"🚀 Training context LM to step {trainer.cfg.steps}")
    result = trainer.train_lm(codes, log_path=log_path, checkpoint_path=ckpt_path)
    print(f"   ✅ Checkpoint saved to {ckpt_path}")

    heldout = result.heldout_sequences
    baseline = unigram_nll(result.train_sequences, heldout, model.cfg.vocab)
    print(f"📊 Held-out NLL {trainer.sequence_nll(heldout):.4f} (unigram {baseline:.4f})")
    try:
        lm_nll, unigram = continuation_nll(trainer.lm, heldout, n=2)
        print(f"📊 Last-2-code continuation NLL {lm_nll:.4f} (unigram {unigram:.4f})")
    except DualVCError as e:
        print(f"   ⚠️ Continuation NLL skipped: {e}")
    return EXIT_OK


def cmd_convert(args, settings: Settings) -> int:
    scfg = stream_config(settings, mode=args.mode, chunk_ms=args.chunk_ms)
    pcm = read_wav(Path(args.input))
    model, lm = load_models(settings, need_lm=not args.offline and scfg.mode == 'full')
    frontend = frontend_config(model.cfg)
    print(f"🚀 Converting {args.input} ({pcm.size / SAMPLE_RATE:.2f} s) to speaker {args.target_speaker}")

    if args.offline:
        mel = mel_frontend(pcm, frontend)
        with torch.no_grad():
            converted = model.convert(torch.as_tensor(mel), args.target_speaker).numpy()
        audio = MelVocoder(frontend)(converted)
        print(f"   ✅ Offline conversion of {mel.shape[0]} frames")
    else:
        session = StreamSession(model, args.target_speaker, scfg, lm=lm, sampling=sampling_config(settings),
                                frontend=frontend, verbose=True)
        piece = scfg.chunk_frames * frontend.frame_shift
        outputs: List[np.ndarray] = []
        for start in range(0, pcm.size, piece):
            out = session.push(pcm[start:start + piece])
            if out is not None:
                outputs.append(out)
        tail = session.flush()
        if tail is not None:
            outputs.append(tail)
        audio = np.concatenate(outputs) if outputs else np.zeros(0, dtype=np.float32)
        print(f"   ✅ {scfg.mode} streaming, {len(session.timings)} chunks of {session.chunk_ms:g} ms")

    write_wav(Path(args.output), audio)
    print(f"   ✅ {audio.size / SAMPLE_RATE:.2f} s written to {args.output}")
    return EXIT_OK


def cmd_bench(args, settings: Settings) -> int:
    if args.presets:
        print("📊 Inference parameter counts (HPC heads excluded, LM added in full mode):")
        for preset in ('tiny', 'toy', 'large'):
            counts = preset_parameter_counts(preset, settings.get('model.speakers'))
            print(f"   • {preset}: standalone={counts['standalone'] / 1e6:.2f}M full={counts['full'] / 1e6:.2f}M")
        return EXIT_OK

    lm_available = (settings.path('checkpoints') / LM_CHECKPOINT).exists()
    if args.input:
        pcm = read_wav(Path(args.input))
    else:
        pcm = librosa.chirp(fmin=110, fmax=880, sr=SAMPLE_RATE, duration=2.0) * 0.3

    reports = []
    for mode in MODES:
        if mode == 'full' and not lm_available:
            print("   ⚠️ No context LM checkpoint; skipping full mode")
            continue
        model, lm = load_models(settings, need_lm=mode == 'full')
        session = StreamSession(model, 0, stream_config(settings, mode=mode), lm=lm,
                                sampling=sampling_config(settings), frontend=frontend_config(model.cfg))
        report = measure_latency(session, pcm)
        reports.append(report)
        print(f"📊 {mode}:")
        print("\n".join(f"   {line}" for line in report.to_text().splitlines()))
        flag = '✅' if report.identity_holds() else '❌'
        print(f"   {flag} total = inference + {report.chunk_wait_ms:g} + {report.lookahead_ms:g}")

    generator = VerifyReportGenerator(settings.path('outputs'))
    path = generator.output_dir / f"latency_{datetime.now().strftime('%Y-%m-%d_%H%M%S')}.md"
    path.write_text("# ⏱️ Latency Benchmark\n\n" + generator.latency_table(reports), encoding='utf-8')
    print(f"   ✅ Latency table saved to {path}")
    return EXIT_OK


def cmd_verify(args, settings: Settings) -> int:
    print("🔬 Running verification suites...")
    results = verify_all(settings.path('checkpoints'), settings.path('corpus'), verbose=True)
    generator = VerifyReportGenerator(settings.path('outputs'))
    report_path = generator.generate_report(results)
    stats = generator.generate_summary_stats(results)
    print(f"   ✅ Report saved to: {report_path}")
    if stats['failed']:
        print(f"❌ {len(stats['failed'])} of {stats['total']} checks failed: {', '.join(stats['failed'])}")
        for line in format_check_lines([r for r in results if not r.passed]):
            print(line)
        return EXIT_VERIFY_FAILED
    print(f"✨ All {stats['total']} checks passed")
    return EXIT_OK


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train-am': cmd_train_am,
    'train-lm': cmd_train_lm,
    'convert': cmd_convert,
    'bench': cmd_bench,
    'verify': cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args)
        return COMMANDS[args.command](args, settings)
    except MissingModelError as e:
        print(f"❌ {e}")
        return EXIT_MISSING_MODEL
    except (FileNotFoundError, FormatError) as e:
        print(f"❌ {e}")
        return EXIT_MISSING_INPUT
    except (ConfigError, ValueError) as e:
        print(f"❌ {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, mix, train, separate, eval, bench-rtf.

Every command echoes its resolved configuration (one JSON line) and is
bit-reproducible under a fixed --seed. Exit codes: 0 success, 1 usage
error, 2 data/format error, 3 numeric failure; errors print one
machine-parsable line 'ERROR[kind] message' on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import load_arrays
from .dsp import VadMask, Waveform, read_wav, save_intervals, write_wav
from .errors import (DomainError, FormatError, SparseSepError, StateError,
                     TrainingError)
from .autodiff import Tensor
from .mixer import (MixSpec, SpeakerProfile, default_profiles, gen_mixture_set,
                    gen_sparse_set, load_dataset, read_manifest, synth_source,
                    write_manifest)
from .model import EnrollmentEmbeddingProvider, ModelConfig, SeparatorModel

DEFAULT_GAMMA = 0.4
STANDARD_BUCKETS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _echo(command, settings):
    print("config: " + json.dumps({"command": command, **settings}, sort_keys=True))


# -- model/provider loading --------------------------------------------------


def _resolve_model_paths(model_arg):
    if os.path.isdir(model_arg):
        return (os.path.join(model_arg, "model.ckpt"),
                os.path.join(model_arg, "config.json"),
                os.path.join(model_arg, "train_config.json"))
    base = os.path.dirname(model_arg)
    return (model_arg, os.path.join(base, "config.json"),
            os.path.join(base, "train_config.json"))


def _load_model(model_arg):
    ckpt_path, config_path, train_config_path = _resolve_model_paths(model_arg)
    if not os.path.exists(ckpt_path) or not os.path.exists(config_path):
        raise StateError(f"missing checkpoint or config under {model_arg!r}")
    model = SeparatorModel(ModelConfig.load(config_path))
    arrays = load_arrays(ckpt_path)
    model.load_params(ckpt_path)
    train_meta = {}
    if os.path.exists(train_config_path):
        with open(train_config_path) as fh:
            train_meta = json.load(fh)
    return model, arrays, train_meta


def _embedding_for(model, arrays, train_meta, speaker_id=None, enroll_path=None):
    if speaker_id is not None:
        key = f"embed.{speaker_id}"
        if key not in arrays:
            raise StateError(f"checkpoint has no embedding for speaker {speaker_id!r}")
        return Tensor(arrays[key])
    if enroll_path is None:
        raise DomainError("need --speaker-id or --enroll")
    provider = EnrollmentEmbeddingProvider(model.config.embed_dim, model.melbank,
                                           model.config.stride,
                                           seed=train_meta.get("seed", 0))
    return provider.embed(read_wav(enroll_path))


def _embedding_for_item(model, arrays, train_meta, item):
    sid = item.get("speaker_id")
    if sid is not None and f"embed.{sid}" in arrays:
        return Tensor(arrays[f"embed.{sid}"])
    return _embedding_for(model, arrays, train_meta, enroll_path=item.get("enroll_path"))


# -- subcommands --------------------------------------------------------------


def cmd_synth(args):
    profiles = default_profiles(args.speakers)
    os.makedirs(args.out, exist_ok=True)
    _echo("synth", {"speakers": args.speakers, "utts_per_speaker": args.utts_per_speaker,
                    "duration": args.duration, "seed": args.seed, "out": args.out})
    records = []
    for i, prof in enumerate(profiles):
        for u in range(args.utts_per_speaker):
            utt = synth_source(prof, args.duration, seed=args.seed + 1000 * i + u)
            stem = f"{prof.speaker_id}_utt{u:03d}"
            write_wav(os.path.join(args.out, stem + ".wav"), utt.waveform)
            save_intervals(os.path.join(args.out, stem + ".txt"), utt.intervals)
            records.append({"path": stem + ".wav", "vad_path": stem + ".txt",
                            "speaker_id": prof.speaker_id})
        # one enrollment utterance per speaker, fully voiced
        enroll = synth_source(prof, args.duration, seed=args.seed + 1000 * i + 999,
                              voiced_only=True)
        write_wav(os.path.join(args.out, f"{prof.speaker_id}_enroll.wav"), enroll.waveform)
    write_manifest(os.path.join(args.out, "sources.jsonl"), records)
    with open(os.path.join(args.out, "speakers.json"), "w") as fh:
        json.dump([p.to_dict() for p in profiles], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _load_sources(manifest_path):
    from .dsp import load_intervals
    root = os.path.dirname(os.path.abspath(manifest_path))
    from .mixer import SourceUtterance
    sources = []
    for rec in read_manifest(manifest_path):
        wav = read_wav(os.path.join(root, rec["path"]))
        intervals = load_intervals(os.path.join(root, rec["vad_path"]))
        sources.append(SourceUtterance(wav, rec["speaker_id"], intervals))
    return sources, root


def cmd_mix(args):
    sources, src_root = _load_sources(args.manifest_in)
    noise_source = None
    if args.noise_dir:
        noise_files = sorted(f for f in os.listdir(args.noise_dir) if f.endswith(".wav"))
        if not noise_files:
            raise FormatError(f"no WAV files in noise dir {args.noise_dir!r}")
        noise_wavs = [read_wav(os.path.join(args.noise_dir, f)).samples for f in noise_files]

        def noise_source(n, rng):
            base = noise_wavs[int(rng.integers(len(noise_wavs)))]
            if len(base) < n:
                base = np.tile(base, n // len(base) + 1)
            off = int(rng.integers(0, len(base) - n + 1))
            return base[off:off + n]

    enroll_paths = {}
    for rec in read_manifest(args.manifest_in):
        sid = rec["speaker_id"]
        cand = os.path.join(src_root, f"{sid}_enroll.wav")
        if os.path.exists(cand):
            enroll_paths[sid] = os.path.relpath(cand, args.out)
    spec = MixSpec(mode=args.mode, noise_prob=args.noise_prob, rng_seed=args.seed)
    _echo("mix", {"mode": args.mode, "count": args.count, "seed": args.seed,
                  "noise_prob": args.noise_prob, "out": args.out,
                  "overlap_targets": args.overlap_targets})
    if args.overlap_targets:
        targets = [float(x) for x in args.overlap_targets.split(",")]
        with open(os.path.join(src_root, "speakers.json")) as fh:
            profiles = [SpeakerProfile.from_dict(d) for d in json.load(fh)]
        gen_sparse_set(profiles, args.count, targets, noisy=args.noise_prob > 0,
                       seed=args.seed, out_dir=args.out, enroll_paths=enroll_paths)
    else:
        gen_mixture_set(sources, args.count, spec, args.seed, args.out,
                        enroll_paths=enroll_paths, noise_source=noise_source)
    return 0


def cmd_train(args):
    from .trainer import TrainConfig, fit
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    _echo("train", {"config": cfg.__dict__, "data": args.data, "val": args.val,
                    "out": args.out})
    model_cfg = ModelConfig.load(args.model_config) if args.model_config else \
        ModelConfig(vad_branch=cfg.mode == "joint")
    model = SeparatorModel(model_cfg, seed=cfg.seed)
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val)
    stats = fit(model, train_set, val_set, cfg, args.out,
                log=lambda msg: print(msg, flush=True))
    from .plots import save_training_curves
    save_training_curves(stats, os.path.join(args.out, "stats.png"))
    return 0


def cmd_separate(args):
    model, arrays, train_meta = _load_model(args.model)
    wav = read_wav(args.input)
    emb = _embedding_for(model, arrays, train_meta,
                         speaker_id=args.speaker_id, enroll_path=args.enroll)
    _echo("separate", {"model": args.model, "input": args.input, "gamma": args.gamma,
                       "early_exit_k": args.early_exit_k, "out": args.out})
    est = model.infer(wav, emb, gamma=args.gamma,
                      early_exit=args.early_exit_k is not None,
                      k=args.early_exit_k)
    write_wav(args.out, est)
    return 0


def cmd_eval(args):
    from .metrics import bucket_report, improvements, write_bucket_csv
    from .plots import save_bucket_figure
    model, arrays, train_meta = _load_model(args.model)
    dataset = load_dataset(args.manifest)
    _echo("eval", {"model": args.model, "manifest": args.manifest,
                   "gamma": args.gamma, "report": args.report})
    results = []
    for item in dataset:
        emb = _embedding_for_item(model, arrays, train_meta, item)
        est = model.infer(item["mixture"], emb, gamma=args.gamma)
        res = improvements(item["mixture"], est, item["target"])
        ratio = item["bucket"] if item["bucket"] is not None else item["overlap_ratio"]
        res.bucket = min(STANDARD_BUCKETS, key=lambda b: abs(b - (ratio or 0.0)))
        results.append(res)
    buckets = sorted({r.bucket for r in results})
    report = bucket_report(results, buckets)
    write_bucket_csv(report, args.report)
    save_bucket_figure(report, os.path.splitext(args.report)[0] + ".png")
    print(f"evaluated {report.total_n} examples; overall SDRi "
          f"{report.overall_sdri:.2f} dB, SI-SNRi {report.overall_sisnri:.2f} dB")
    return 0


def cmd_bench_rtf(args):
    from .metrics import bench_rtf, write_rtf_csv
    from .plots import save_rtf_figure
    model, arrays, train_meta = _load_model(args.model)
    dataset = load_dataset(args.manifest)
    ks = [int(x) for x in args.k_sweep.split(",")]
    _echo("bench-rtf", {"model": args.model, "manifest": args.manifest,
                        "k_sweep": ks, "gamma": args.gamma, "report": args.report})
    bench_items = []
    for item in dataset:
        emb = _embedding_for_item(model, arrays, train_meta, item)
        gate = VadMask(item["z"].values) if args.gate_from_labels else None
        bench_items.append((item["mixture"], emb, item["target"], gate))
    rows = bench_rtf(model, bench_items, ks, gamma=args.gamma, repeats=args.repeats)
    write_rtf_csv(rows, args.report)
    save_rtf_figure(rows, os.path.splitext(args.report)[0] + ".png")
    for row in rows:
        print(f"k={row.k}  SDRi {row.sdri_mean:.2f} dB  SI-SNRi {row.sisnri_mean:.2f} dB  "
              f"RTF {row.rtf:.3f}")
    return 0


# -- argument wiring ----------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sparsesep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize pseudo-speech sources")
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--utts-per-speaker", type=int, default=10)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("mix", help="simulate speech mixtures")
    p.add_argument("--mode", choices=["min", "max"], default="max")
    p.add_argument("--manifest-in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-dir", default=None)
    p.add_argument("--noise-prob", type=float, default=0.5)
    p.add_argument("--overlap-targets", default=None,
                   help="comma list of overlap ratios; switches to the sparse eval generator")
    p.set_defaults(fn=cmd_mix)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument("--model-config", default=None, help="ModelConfig JSON file")
    p.add_argument("--data", required=True, help="training mixture manifest")
    p.add_argument("--val", required=True, help="validation mixture manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("separate", help="separate one target speaker")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--enroll", default=None)
    p.add_argument("--speaker-id", default=None)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--early-exit-k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_separate)

    p = sub.add_parser("eval", help="bucketed SDRi/SI-SNRi report")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-rtf", help="early-exit RTF sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k-sweep", default="1,2,3,4")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--gate-from-labels", action="store_true",
                   help="drive the early-exit gate from manifest VAD labels")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_bench_rtf)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"ERROR[usage] {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"ERROR[numeric] {exc}", file=sys.stderr)
        return 3
    except (FormatError, FileNotFoundError, StateError, DomainError, SparseSepError) as exc:
        print(f"ERROR[data] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``cribdiar`` command line: synth, pretrain, train, predict, score, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import archive as arc
from .features import SAMPLE_RATE, class_names, load_wav, merge_classes, rasterize_labels
from .models import EMBED_KINDS, FEAT_KINDS, PROFILES, DiarizationModel
from .scoring import ScoreReport, der_breakdown, frame_error_rate, read_rttm, write_rttm

class CliError(Exception):
    """A user-facing failure: printed as a message, exit status 1."""


def _seed(default: int) -> int:
    value = os.environ.get("CRIBDIAR_SEED")
    if value in (None, ""):
        return default
    try:
        return int(value)
    except ValueError:
        raise CliError(f"CRIBDIAR_SEED must be an integer, got {value!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import SynthSpec, synth_generate

    spec = SynthSpec(
        seed=_seed(args.seed),
        num_train=args.num_train,
        num_val=args.num_val,
        num_test=args.num_test,
        num_pretrain=args.num_pretrain,
        clip_len_s=args.clip_len,
        event_rate=args.event_rate,
        overlap_prob=args.overlap_prob,
    )
    out = synth_generate(spec, args.out)
    print(f"wrote synthetic corpus to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .mil import load_bags, mil_pretrain

    bags = load_bags(args.bags)
    val_bags = load_bags(args.val_bags) if args.val_bags else []
    if not bags:
        raise CliError(f"{args.bags}: no bags within the allowed duration range")
    result = mil_pretrain(
        args.variant,
        args.feat,
        args.embed,
        bags,
        val_bags,
        lr=args.lr,
        decay=args.decay,
        epochs=args.epochs,
        profile=args.profile,
        seed=_seed(args.seed),
    )
    meta = {
        "kind": "pretrain",
        "variant": args.variant,
        "feat": args.feat,
        "embed": args.embed,
        "profile": args.profile,
        "losses": result.losses,
        "val_accuracy": None if math.isnan(result.val_accuracy) else result.val_accuracy,
    }
    arc.save_archive(result.archive, args.out, meta)
    acc = "n/a" if math.isnan(result.val_accuracy) else f"{result.val_accuracy:.3f}"
    print(f"wrote {len(result.archive)} tensors to {args.out}; held-out bag accuracy {acc}")
    return 0


def cmd_train(args) -> int:
    from .synth import load_split
    from .training import TrainConfig, seed_override, train, write_metrics_csv

    try:
        config = seed_override(TrainConfig.from_json(args.config))
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"bad config {args.config}: {exc}") from None
    archive = arc.load_archive(args.load) if args.load else None
    if config.load_set and archive is None:
        raise CliError(f"config loads {config.load_set}; pass --load <archive>")
    data = Path(args.data)
    train_set, val_set = load_split(data / "train"), load_split(data / "val")
    result = train(config, train_set, val_set, archive)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "checkpoint", "config": config.to_dict(), "best_epoch": result.best_epoch}
    arc.save_archive(result.model.named_parameters(), out / "model.ckpt", meta)
    write_metrics_csv(out / "metrics.csv", result.history)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val DER {best.val_der:.4f}, frame error {best.val_fer:.4f}; wrote {out}")
    return 0


def load_checkpoint(path: str | Path) -> tuple[DiarizationModel, dict]:
    """Rebuild a model from a ``train`` checkpoint archive."""
    from .training import TrainConfig

    params, meta = arc.read_archive(path)
    if "config" not in meta:
        raise CliError(f"{path}: not a training checkpoint (no config in its manifest)")
    config = TrainConfig.from_dict(meta["config"])
    model = DiarizationModel(config.model_spec())
    present = [c for c in arc.COMPONENTS if any(k.startswith(c + ".") for k in params)]
    arc.load_into(model.named_parameters(), params, present)
    return model, meta


def cmd_predict(args) -> int:
    from .training import TrainConfig, predict

    model, meta = load_checkpoint(args.model)
    config = TrainConfig.from_dict(meta["config"])
    wav = load_wav(args.wav)
    threshold = config.threshold if args.threshold is None else args.threshold
    segments = predict(model, wav.samples, threshold, config.median_width)
    file_id = Path(args.wav).stem
    if args.out:
        write_rttm(args.out, segments, file_id)
        print(f"wrote {len(segments)} segments to {args.out}")
    else:
        from .scoring import format_rttm

        sys.stdout.write(format_rttm(segments, file_id))
    return 0


def cmd_score(args) -> int:
    ref, hyp = read_rttm(args.ref), read_rttm(args.hyp)
    if args.classes:
        ref, hyp = merge_classes(ref, args.classes), merge_classes(hyp, args.classes)
        labels = list(class_names(args.classes))
    else:
        labels = sorted({s.label for s in ref} | {s.label for s in hyp})
    breakdown = der_breakdown(ref, hyp, labels)
    if breakdown.ref_ms == 0:
        raise CliError(f"{args.ref}: reference has no speech, DER is undefined")
    duration = args.duration or max(s.end for s in ref + hyp)
    n_samples = max(1, int(round(duration * SAMPLE_RATE)))
    fer = frame_error_rate(rasterize_labels(ref, n_samples, labels), rasterize_labels(hyp, n_samples, labels))
    report = ScoreReport.from_breakdown(breakdown, fer)
    text = report.table() if args.table else report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_graph_suite, run_op_suite

    results = {f"op {k}": v for k, v in run_op_suite(range(args.seeds)).items()}
    per_tensor = None if args.profile == "tiny" else args.coords
    # exhaustive at tiny widths; wider graphs have too many near-kink units for a live stencil
    graphs = run_graph_suite(args.profile, per_tensor=per_tensor, seed=_seed(0), freeze_branches=per_tensor is not None)
    results.update({f"graph {k}": v for k, v in graphs.items()})
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<40s} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst <= TOLERANCE else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cribdiar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-train", type=int, default=60)
    s.add_argument("--num-val", type=int, default=10)
    s.add_argument("--num-test", type=int, default=10)
    s.add_argument("--num-pretrain", type=int, default=120)
    s.add_argument("--clip-len", type=float, default=20.0, help="clip length in seconds")
    s.add_argument("--event-rate", type=float, default=0.4, help="vocal events per second")
    s.add_argument("--overlap-prob", type=float, default=0.15)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="MIL pre-training on labelled bags")
    s.add_argument("--variant", required=True, choices=["mil1", "mil2"])
    s.add_argument("--feat", required=True, choices=FEAT_KINDS)
    s.add_argument("--embed", required=True, choices=EMBED_KINDS)
    s.add_argument("--bags", required=True, help="CSV with wav_path,class,start_s,end_s")
    s.add_argument("--val-bags", help="held-out bag CSV for accuracy")
    s.add_argument("--out", required=True, help="archive path")
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--lr", type=float, default=0.0005)
    s.add_argument("--decay", type=float, default=0.5)
    s.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train a diarization model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="corpus directory with train/ and val/")
    s.add_argument("--load", help="pre-trained archive for the config's load set")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write an RTTM for one WAV file")
    s.add_argument("--model", required=True, help="checkpoint written by train")
    s.add_argument("--wav", required=True)
    s.add_argument("--out", help="RTTM path (default: stdout)")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("score", help="DER and frame error of a hypothesis RTTM")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--classes", type=int, choices=[3, 4], help="map labels onto the 3- or 4-class inventory")
    s.add_argument("--duration", type=float, help="recording length in seconds for the frame grid")
    s.add_argument("--table", action="store_true", help="print a text table instead of JSON")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--profile", default="tiny", choices=sorted(PROFILES))
    s.add_argument("--coords", type=int, default=2, help="sampled coordinates per tensor above tiny width")
    s.add_argument("--seeds", type=int, default=10, help="random points per op")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, arc.ArchiveError, OSError, ValueError, KeyError) as exc:
        print(f"cribdiar {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

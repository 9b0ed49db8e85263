"""``gensync`` command-line entry point.

Exit codes: 0 success, 1 contract / validation / usage errors, 2 I/O errors.
Human-readable progress goes to stderr; reports go to files or stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import GenSyncError, UnknownIdentityError
from .evaluate import (
    cross_drive, drive, evaluate_suite, export_sequence, ground_truth_predictor, report_json, swap_identities,
)
from .gradcheck import TOLERANCE, pipeline_gradcheck
from .synthetic import audio_from_records, generate_dataset, load_dataset, synth_audio
from .train import TrainConfig, measure_training_cost, train_canonical, train_joint

log = logging.getLogger("gensync")

ATTENTION_SCHEMA = "gensync-attention/1"
GRADCHECK_SCHEMA = "gensync-gradcheck/1"
SWAP_SCHEMA = "gensync-swap/1"
CROSS_SCHEMA = "gensync-cross-drive/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(deterministic_only=False):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--deterministic", action="store_true",
                   help="limit BLAS/OpenMP pools to one thread for byte-identical reruns")
    if not deterministic_only:
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return p


def _training(p):
    p.add_argument("--config", type=Path, default=None, help="JSON file mirroring TrainConfig")
    p.add_argument("--stage1-iters", type=int, default=None)
    p.add_argument("--stage2-iters", type=int, default=None)
    p.add_argument("--n-gaussians", type=int, default=None)
    p.add_argument("--log", type=Path, default=None, help="training log CSV")


def build_parser():
    common = _common()
    parser = _Parser(prog="gensync", description="Multi-identity audio-driven Gaussian face deformation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gains", type=str, default=None, help="comma-separated style gains, one per identity")
    p.add_argument("--profile", choices=["smooth", "speechlike"], default="speechlike")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--png", action="store_true", help="also write a PNG copy of every frame")

    p = sub.add_parser("train-canonical", parents=[common], help="stage 1 for one identity")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--out", type=Path, required=True)
    _training(p)

    p = sub.add_parser("train-joint", parents=[common], help="stage 2 over every identity")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True, help="directory of <label>.ckpt stage-1 checkpoints")
    p.add_argument("--out", type=Path, required=True)
    _training(p)

    p = sub.add_parser("render", parents=[common], help="render one identity over an audio track")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--audio", default="train", help="'train' (needs --data) or 'novel:SEED'")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--frames", type=int, default=100, help="length of a novel track")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-attention", type=Path, default=None, help="write per-frame attention weights as JSON")

    p = sub.add_parser("swap", parents=[common], help="render TARGET with SOURCE's identity vector")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cross-drive", parents=[common], help="drive an identity with a novel track")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--identity", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--profile", choices=["smooth", "speechlike"], default="smooth")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="test-split PSNR and sync report")
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ground-truth", action="store_true", help="score the corpus against itself")

    p = sub.add_parser("cost", parents=[common], help="joint vs per-identity training cost")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--target-psnr", type=float, default=27.0)
    p.add_argument("--workdir", type=Path, default=None, help="keep the dataset and checkpoints here")
    p.add_argument("--out", type=Path, required=True)
    _training(p)

    p = sub.add_parser("gradcheck", parents=[_common(deterministic_only=True)],
                       help="finite-difference check of the full pipeline")
    p.add_argument("--full", action="store_true", help="check every coordinate instead of a sample")
    return parser


# ---------------------------------------------------------------- helpers

def _config(args):
    return TrainConfig.from_file(args.config, seed=args.seed, stage1_iters=args.stage1_iters,
                                 stage2_iters=args.stage2_iters, n_gaussians=args.n_gaussians)


def _write_text(path, text):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _stage1_path(directory, label):
    for name in (f"{label}.ckpt", f"stage1_{label}.ckpt"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(2, f"no stage-1 checkpoint for identity {label!r}", str(directory / f"{label}.ckpt"))


def _novel_track(model, frames, seed, profile="smooth"):
    return synth_audio(frames, seed, profile, model.config.audio_dim, source=f"novel:{seed}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    gains = [float(g) for g in args.gains.split(",")] if args.gains else None
    man = generate_dataset(args.identities, args.frames, _seed(args), args.out, gains=gains,
                           image_size=args.image_size, profile=args.profile, png=args.png)
    log.info("wrote %d identities x %d frames to %s", len(man.identities), args.frames, args.out)


def cmd_train_canonical(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    if args.identity not in ds.labels:
        raise UnknownIdentityError(args.identity, ds.labels)
    ckpt = train_canonical(ds, args.identity, cfg, args.log)
    save_checkpoint(ckpt, args.out)
    log.info("stage 1 %s: train PSNR %.2f dB -> %s", args.identity, ckpt.meta["train_psnr"], args.out)


def cmd_train_joint(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    stage1 = {label: load_checkpoint(_stage1_path(args.stage1, label)) for label in ds.labels}
    ckpt = train_joint(ds, stage1, cfg, args.log)
    save_checkpoint(ckpt, args.out)
    log.info("stage 2 over %s -> %s", ",".join(ds.labels), args.out)


def cmd_render(args):
    model = load_checkpoint(args.ckpt).model
    model.cloud(args.identity)
    if args.audio == "train":
        if args.data is None:
            raise UsageError("render --audio train needs --data")
        recs = load_dataset(args.data).records(args.identity)
        audio = audio_from_records(recs, source=args.identity)
        eyes, views = np.array([r.eye for r in recs]), np.array([r.viewpoint for r in recs])
    elif args.audio.startswith("novel:"):
        try:
            seed = int(args.audio.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --audio value {args.audio!r}; expected novel:SEED") from None
        audio, eyes, views = _novel_track(model, args.frames, seed), None, None
    else:
        raise UsageError(f"bad --audio value {args.audio!r}; expected 'train' or 'novel:SEED'")
    apertures, frames = drive(model, args.identity, audio.embedding, eyes, views)
    export_sequence(frames, args.out)
    if args.dump_attention is not None:
        _dump_attention(model, args, audio, eyes, views)
    log.info("rendered %d frames to %s", len(frames), args.out)


def _dump_attention(model, args, audio, eyes, views):
    T = audio.embedding.shape[0]
    eyes = np.zeros((T, model.config.eye_dim)) if eyes is None else eyes
    views = np.zeros((T, model.config.view_dim)) if views is None else views
    out = []
    with no_grad():
        for n in range(T):
            w = model.forward_frame(args.identity, audio.embedding[n], eyes[n], views[n],
                                    render_image=False).attention_weights.data
            out.append({"frame": n, "weights": w.tolist()})
    doc = {"schema": ATTENTION_SCHEMA, "identity": args.identity, "tokens": ["m", "e", "v"], "frames": out}
    _write_text(args.dump_attention, json.dumps(doc) + "\n")


def cmd_swap(args):
    model = load_checkpoint(args.ckpt).model
    audio = _novel_track(model, args.frames, _seed(args))
    res = swap_identities(model, args.source, args.target, audio, out_dir=args.out)
    doc = {"schema": SWAP_SCHEMA, "source": args.source, "target": args.target, "seed": _seed(args),
           "own": res.own.to_dict(), "swapped": res.swapped.to_dict(), "amplitude_ratio": res.amplitude_ratio}
    _write_text(args.out / "report.json", report_json(doc))
    sys.stdout.write(report_json(doc))
    log.info("amplitude own %.4f, with %s's vector %.4f", res.own.amplitude, args.source, res.swapped.amplitude)


def cmd_cross_drive(args):
    model = load_checkpoint(args.ckpt).model
    audio = _novel_track(model, args.frames, _seed(args), args.profile)
    rep, _ = cross_drive(model, args.identity, audio, out_dir=args.out)
    doc = {"schema": CROSS_SCHEMA, "seed": _seed(args), "profile": args.profile, **rep.to_dict()}
    _write_text(args.out / "report.json", report_json(doc))
    sys.stdout.write(report_json(doc))
    log.info("cross-drive %s: r = %.3f", args.identity, rep.r)


def cmd_evaluate(args):
    ds = load_dataset(args.data)
    if args.ground_truth:
        report = evaluate_suite(None, ds, predictor=ground_truth_predictor(ds))
    else:
        if args.ckpt is None:
            raise UsageError("evaluate needs --ckpt unless --ground-truth is given")
        report = evaluate_suite(load_checkpoint(args.ckpt), ds)
    _write_text(args.out, report_json(report))
    for e in report["identities"]:
        log.info("%s: PSNR %s dB, r = %.3f", e["identity"], e["psnr"], e["sync_r"])


def cmd_cost(args):
    cfg = _config(args)
    with contextlib.ExitStack() as stack:
        work = args.workdir or Path(stack.enter_context(tempfile.TemporaryDirectory()))
        data_dir = work / "data"
        if not (data_dir / "manifest.json").exists():
            generate_dataset(args.identities, args.frames, args.data_seed, data_dir,
                             image_size=cfg.image_size)
        ds = load_dataset(data_dir)
        report, _ = measure_training_cost(ds, cfg, args.target_psnr,
                                          workdir=work / "runs" if args.workdir else None)
    _write_text(args.out, report_json(report))
    log.info("step ratio %.3f, wall-clock ratio %.3f", report["step_ratio"], report["wall_clock_ratio"])


def cmd_gradcheck(args):
    errs = pipeline_gradcheck(full=args.full)
    for name, err in errs.items():
        print(f"{name:<12s} {err:.3e}", file=sys.stderr)
    ok = all(e < TOLERANCE for e in errs.values())
    sys.stdout.write(json.dumps({"schema": GRADCHECK_SCHEMA, "full": args.full, "tolerance": TOLERANCE,
                                 "max_rel_err": errs, "pass": ok}, indent=2) + "\n")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data, "train-canonical": cmd_train_canonical, "train-joint": cmd_train_joint,
    "render": cmd_render, "swap": cmd_swap, "cross-drive": cmd_cross_drive, "evaluate": cmd_evaluate,
    "cost": cmd_cost, "gradcheck": cmd_gradcheck,
}


def _thread_limit(deterministic):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit(args.deterministic):
            code = COMMANDS[args.command](args)
        return 0 if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"gensync: I/O error: {exc}", file=sys.stderr)
        return 2
    except (GenSyncError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gensync: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
